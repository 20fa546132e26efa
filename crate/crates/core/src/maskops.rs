//! Mask algebra: greedy non-overlapping selection, IoU de-duplication,
//! inpainting-mask construction and white-background compositing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::io;
use crate::model::{Mask, ObjectMask, RgbImage, RgbdFrame};

pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.05;
/// A candidate covered by a kept mask beyond this fraction of its own area is a part duplicate.
pub const CONTAINMENT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_DILATION_PX: usize = 8;
pub const DEFAULT_PAD_FRACTION: f64 = 0.15;

pub const WHITE: [u8; 3] = [255, 255, 255];

pub const JOB_IMAGE_FILE: &str = "image.png";
pub const JOB_MASK_FILE: &str = "mask.png";
pub const JOB_PROMPT_FILE: &str = "prompt.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct MaskCandidateSet {
    pub candidates: Vec<ObjectMask>,
}

impl MaskCandidateSet {
    pub fn new(candidates: Vec<ObjectMask>) -> Result<Self> {
        if let Some(first) = candidates.first() {
            for c in &candidates[1..] {
                check_same(&first.bits, &c.bits)?;
            }
        }
        Ok(MaskCandidateSet { candidates })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintJob {
    pub isolated_image: RgbImage,
    pub fill_mask: Mask,
    pub prompt: String,
}

impl InpaintJob {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::save_color(&dir.join(JOB_IMAGE_FILE), &self.isolated_image)?;
        io::save_mask(&dir.join(JOB_MASK_FILE), &self.fill_mask)?;
        let p = dir.join(JOB_PROMPT_FILE);
        std::fs::write(&p, &self.prompt).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let isolated_image = io::load_color(&dir.join(JOB_IMAGE_FILE))?;
        let fill_mask = io::load_mask(&dir.join(JOB_MASK_FILE))?;
        check_same(&isolated_image, &fill_mask)?;
        let p = dir.join(JOB_PROMPT_FILE);
        let prompt = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(InpaintJob {
            isolated_image,
            fill_mask,
            prompt: prompt.trim_end_matches(['\n', '\r']).to_string(),
        })
    }
}

/// A padded crop of one object on white, with the frame position of its top-left pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub image: RgbImage,
    pub offset: (usize, usize),
}

impl Composite {
    /// Write the crop's pixels under `mask` back into `target` (frame-sized).
    pub fn paste_into(&self, target: &mut RgbImage, mask: &Mask) {
        let (ox, oy) = self.offset;
        for y in 0..self.image.height() {
            for x in 0..self.image.width() {
                if *mask.get(ox + x, oy + y) {
                    target.set(ox + x, oy + y, *self.image.get(x, y));
                }
            }
        }
    }
}

fn check_same<A, B>(a: &crate::model::Grid<A>, b: &crate::model::Grid<B>) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

fn intersection(a: &Mask, b: &Mask) -> usize {
    a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count()
}

pub fn mask_iou(a: &ObjectMask, b: &ObjectMask) -> Result<f64> {
    check_same(&a.bits, &b.bits)?;
    let inter = intersection(&a.bits, &b.bits);
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Greedy selection by descending confidence (ties: larger area, then input order).
pub fn select_masks(set: &MaskCandidateSet, overlap_threshold: f64) -> Result<Vec<ObjectMask>> {
    if !(0.0..=1.0).contains(&overlap_threshold) {
        return Err(Error::Precondition(format!(
            "overlap threshold {overlap_threshold} outside [0, 1]"
        )));
    }
    let c = &set.candidates;
    let areas: Vec<usize> = c.iter().map(|m| m.area()).collect();
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by(|&i, &j| {
        c[j].confidence
            .total_cmp(&c[i].confidence)
            .then(areas[j].cmp(&areas[i]))
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let ok = kept.iter().all(|&k| {
            let inter = intersection(&c[i].bits, &c[k].bits);
            let union = areas[i] + areas[k] - inter;
            let iou = inter as f64 / union as f64;
            let contained = inter as f64 / areas[i] as f64;
            iou <= overlap_threshold && contained <= CONTAINMENT_THRESHOLD
        });
        if ok {
            kept.push(i);
        }
    }
    Ok(kept.into_iter().map(|i| c[i].clone()).collect())
}

/// Dilation by a Euclidean disk of radius `r` pixels.
pub fn dilate(mask: &Mask, r: usize) -> Mask {
    if r == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width(), mask.height());
    let ri = r as isize;
    let offsets: Vec<(isize, isize)> = (-ri..=ri)
        .flat_map(|dy| (-ri..=ri).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= ri * ri)
        .collect();
    let mut out = mask.clone();
    for (x, y) in mask.set_pixels() {
        // interior pixels stamp nothing new
        let interior = x > 0
            && y > 0
            && x + 1 < w
            && y + 1 < h
            && *mask.get(x - 1, y)
            && *mask.get(x + 1, y)
            && *mask.get(x, y - 1)
            && *mask.get(x, y + 1);
        if interior {
            continue;
        }
        for &(dx, dy) in &offsets {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                out.set(nx as usize, ny as usize, true);
            }
        }
    }
    out
}

pub fn build_inpaint_job(
    target: &ObjectMask,
    others: &[ObjectMask],
    frame: &RgbdFrame,
    dilation_px: usize,
) -> Result<InpaintJob> {
    check_same(&target.bits, &frame.rgb)?;
    let mut union = Mask::new(frame.width(), frame.height(), false);
    for o in others {
        check_same(&o.bits, &frame.rgb)?;
        for (u, b) in union.data_mut().iter_mut().zip(o.bits.data()) {
            *u |= *b;
        }
    }
    let mut fill_mask = dilate(&union, dilation_px);
    for (f, t) in fill_mask.data_mut().iter_mut().zip(target.bits.data()) {
        *f &= !*t;
    }
    let isolated_image = crate::model::Grid::from_fn(frame.width(), frame.height(), |x, y| {
        if *target.bits.get(x, y) {
            *frame.rgb.get(x, y)
        } else {
            WHITE
        }
    });
    Ok(InpaintJob {
        isolated_image,
        fill_mask,
        prompt: target.prompt.clone(),
    })
}

/// `[start, end]` of a span of length `len` at `lo` widened to `round(len * (1 + 2 pad))`, clamped to `[0, limit)`.
fn padded_span(lo: usize, len: usize, pad: f64, limit: usize) -> (usize, usize) {
    let target = (len as f64 * (1.0 + 2.0 * pad)).round() as usize;
    let target = target.max(len);
    let before = (target - len) / 2;
    let start = lo as isize - before as isize;
    let end = start + target as isize - 1;
    (start.max(0) as usize, end.min(limit as isize - 1) as usize)
}

pub fn composite_on_white(frame: &RgbdFrame, mask: &ObjectMask, pad_fraction: f64) -> Result<Composite> {
    check_same(&mask.bits, &frame.rgb)?;
    if !(pad_fraction >= 0.0) {
        return Err(Error::Precondition(format!("negative pad fraction {pad_fraction}")));
    }
    let (x0, y0, x1, y1) = mask
        .bits
        .bounding_box()
        .ok_or_else(|| Error::Empty("mask has no pixels".into()))?;
    let (sx, ex) = padded_span(x0, x1 - x0 + 1, pad_fraction, frame.width());
    let (sy, ey) = padded_span(y0, y1 - y0 + 1, pad_fraction, frame.height());
    let image = crate::model::Grid::from_fn(ex - sx + 1, ey - sy + 1, |x, y| {
        if *mask.bits.get(sx + x, sy + y) {
            *frame.rgb.get(sx + x, sy + y)
        } else {
            WHITE
        }
    });
    Ok(Composite {
        image,
        offset: (sx, sy),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CameraIntrinsics, Grid};
    use proptest::prelude::*;

    fn rect(w: usize, h: usize, x0: usize, y0: usize, rw: usize, rh: usize) -> Mask {
        Grid::from_fn(w, h, |x, y| x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh)
    }

    fn om(bits: Mask, conf: f64, prompt: &str) -> ObjectMask {
        ObjectMask::new(bits, conf, prompt).unwrap()
    }

    fn frame(w: usize, h: usize) -> RgbdFrame {
        let k = CameraIntrinsics::new(10.0, 10.0, 0.0, 0.0, w as u32, h as u32).unwrap();
        let rgb = Grid::from_fn(w, h, |x, y| [x as u8, y as u8, 7]);
        RgbdFrame::new(rgb, Grid::new(w, h, 1.0), k).unwrap()
    }

    #[test]
    fn iou_identical_disjoint_and_shifted() {
        let a = om(rect(30, 30, 0, 0, 10, 10), 1.0, "a");
        let b = om(rect(30, 30, 20, 20, 10, 10), 1.0, "b");
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);
        // overlap 5x10 = 50, union 100 + 100 - 50 = 150
        let s = om(rect(30, 30, 5, 0, 10, 10), 1.0, "s");
        assert!((mask_iou(&a, &s).unwrap() - 50.0 / 150.0).abs() < 1e-15);
        let small = om(rect(10, 10, 0, 0, 2, 2), 1.0, "x");
        assert!(matches!(mask_iou(&a, &small), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn greedy_drops_overlapping_candidate() {
        // A 10x10 at x=0, B 10x10 at x=2: overlap 80, union 120, IoU 0.667
        let a = om(rect(40, 20, 0, 0, 10, 10), 0.9, "a");
        let b = om(rect(40, 20, 2, 0, 10, 10), 0.8, "b");
        let c = om(rect(40, 20, 25, 5, 10, 10), 0.7, "c");
        assert!(mask_iou(&a, &b).unwrap() > 0.6);
        let set = MaskCandidateSet::new(vec![b, c.clone(), a.clone()]).unwrap();
        let kept = select_masks(&set, DEFAULT_OVERLAP_THRESHOLD).unwrap();
        assert_eq!(kept, vec![a, c]);
    }

    #[test]
    fn single_and_empty_candidate_sets() {
        let a = om(rect(8, 8, 1, 1, 3, 3), 0.4, "a");
        let one = MaskCandidateSet::new(vec![a.clone()]).unwrap();
        assert_eq!(select_masks(&one, 0.05).unwrap(), vec![a]);
        let none = MaskCandidateSet::new(vec![]).unwrap();
        assert!(select_masks(&none, 0.05).unwrap().is_empty());
        assert!(select_masks(&none, 1.5).is_err());
    }

    #[test]
    fn contained_part_is_rejected_even_with_permissive_iou() {
        // A is 10x10 (100 px), B is 6x5 (30 px) inside it: IoU 0.3, containment 1.0
        let a = om(rect(20, 20, 0, 0, 10, 10), 0.9, "mug");
        let b = om(rect(20, 20, 2, 2, 6, 5), 0.8, "handle");
        assert!((mask_iou(&a, &b).unwrap() - 0.3).abs() < 1e-15);
        let set = MaskCandidateSet::new(vec![a.clone(), b]).unwrap();
        assert_eq!(select_masks(&set, 0.5).unwrap(), vec![a]);
    }

    #[test]
    fn confidence_ties_prefer_larger_then_input_order() {
        let small = om(rect(20, 20, 0, 0, 4, 4), 0.5, "small");
        let big = om(rect(20, 20, 0, 0, 6, 6), 0.5, "big");
        let set = MaskCandidateSet::new(vec![small.clone(), big.clone()]).unwrap();
        assert_eq!(select_masks(&set, 0.05).unwrap(), vec![big]);
        let twin = om(rect(20, 20, 0, 0, 4, 4), 0.5, "twin");
        let set = MaskCandidateSet::new(vec![small.clone(), twin]).unwrap();
        assert_eq!(select_masks(&set, 0.05).unwrap(), vec![small]);
    }

    #[test]
    fn inpaint_job_without_others_is_empty() {
        let f = frame(12, 10);
        let t = om(rect(12, 10, 2, 2, 3, 3), 1.0, "red mug");
        let job = build_inpaint_job(&t, &[], &f, 8).unwrap();
        assert_eq!(job.fill_mask.count(), 0);
        assert_eq!(job.prompt, "red mug");
        assert_eq!(*job.isolated_image.get(3, 3), [3, 3, 7]);
        assert_eq!(*job.isolated_image.get(0, 0), WHITE);
    }

    #[test]
    fn adjacent_occluder_is_copied_exactly_without_dilation() {
        let f = frame(12, 10);
        let t = om(rect(12, 10, 2, 2, 3, 3), 1.0, "t");
        // 4 px column right next to the target
        let o = om(rect(12, 10, 5, 2, 1, 4), 1.0, "o");
        let job = build_inpaint_job(&t, std::slice::from_ref(&o), &f, 0).unwrap();
        assert_eq!(job.fill_mask, o.bits);
    }

    #[test]
    fn occluder_overlapping_target_is_clipped() {
        let f = frame(12, 10);
        let t = om(rect(12, 10, 2, 2, 3, 3), 1.0, "t");
        // 3x3 at (4, 4) shares the single pixel (4, 4) with the target
        let o = om(rect(12, 10, 4, 4, 3, 3), 1.0, "o");
        let job = build_inpaint_job(&t, &[o], &f, 0).unwrap();
        assert_eq!(job.fill_mask.count(), 8);
        assert!(!*job.fill_mask.get(4, 4));
    }

    #[test]
    fn dilation_is_a_euclidean_disk() {
        let mut m = Mask::new(21, 21, false);
        m.set(10, 10, true);
        let d = dilate(&m, 3);
        // lattice points with x^2 + y^2 <= 9: 29
        assert_eq!(d.count(), 29);
        assert!(*d.get(13, 10) && !*d.get(13, 11) && *d.get(12, 12));
    }

    #[test]
    fn composite_pads_and_clamps() {
        let f = frame(40, 30);
        let m = om(rect(40, 30, 10, 10, 10, 10), 1.0, "x");
        let c = composite_on_white(&f, &m, 0.15).unwrap();
        // round(10 * 1.3) = 13, one pixel before the box and two after
        assert_eq!((c.image.width(), c.image.height()), (13, 13));
        assert_eq!(c.offset, (9, 9));
        assert_eq!(*c.image.get(0, 0), WHITE);
        assert_eq!(*c.image.get(1, 1), [10, 10, 7]);

        let edge = om(rect(40, 30, 0, 25, 10, 5), 1.0, "x");
        let c = composite_on_white(&f, &edge, 0.15).unwrap();
        assert_eq!(c.offset, (0, 24));
        assert_eq!((c.image.width(), c.image.height()), (12, 6));

        let full = om(Mask::new(40, 30, true), 1.0, "x");
        let c = composite_on_white(&f, &full, 0.0).unwrap();
        assert_eq!(c.offset, (0, 0));
        assert_eq!(c.image, f.rgb);
    }

    #[test]
    fn inpaint_job_directory_round_trip() {
        let f = frame(12, 10);
        let t = om(rect(12, 10, 2, 2, 3, 3), 1.0, "blue bowl");
        let o = om(rect(12, 10, 6, 2, 3, 4), 1.0, "o");
        let job = build_inpaint_job(&t, &[o], &f, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        job.save(dir.path()).unwrap();
        assert_eq!(InpaintJob::load(dir.path()).unwrap(), job);
    }

    fn arb_masks() -> impl Strategy<Value = Vec<ObjectMask>> {
        prop::collection::vec((0usize..20, 0usize..20, 1usize..10, 1usize..10, 0u8..=10), 1..7).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (x, y, w, h, c))| om(rect(30, 30, x, y, w, h), c as f64 / 10.0, &format!("m{i}")))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn kept_masks_respect_threshold(masks in arb_masks(), thr in 0.0f64..0.6) {
            let set = MaskCandidateSet::new(masks).unwrap();
            let kept = select_masks(&set, thr).unwrap();
            for i in 0..kept.len() {
                for j in 0..kept.len() {
                    if i != j {
                        prop_assert!(mask_iou(&kept[i], &kept[j]).unwrap() <= thr);
                    }
                }
            }
        }

        #[test]
        fn raising_confidence_keeps_a_kept_mask(masks in arb_masks(), pick in 0usize..7, boost in 0.0f64..1.0) {
            let set = MaskCandidateSet::new(masks.clone()).unwrap();
            let kept = select_masks(&set, 0.05).unwrap();
            let pick = pick % kept.len();
            let target = kept[pick].clone();
            let mut raised = masks;
            for m in raised.iter_mut() {
                if *m == target {
                    m.confidence = (m.confidence + boost).min(1.0);
                }
            }
            let again = select_masks(&MaskCandidateSet::new(raised).unwrap(), 0.05).unwrap();
            prop_assert!(again.iter().any(|m| m.prompt == target.prompt));
        }

        #[test]
        fn fill_mask_never_touches_target(masks in arb_masks(), r in 0usize..4) {
            let f = frame(30, 30);
            let job = build_inpaint_job(&masks[0], &masks[1..], &f, r).unwrap();
            for (a, b) in job.fill_mask.data().iter().zip(masks[0].bits.data()) {
                prop_assert!(!(*a && *b));
            }
        }

        #[test]
        fn composite_paste_back_restores_masked_pixels(masks in arb_masks(), pad in 0.0f64..0.5) {
            let f = frame(30, 30);
            let m = &masks[0];
            let c = composite_on_white(&f, m, pad).unwrap();
            let mut canvas = Grid::new(30, 30, [0u8; 3]);
            c.paste_into(&mut canvas, &m.bits);
            for (x, y) in m.bits.set_pixels() {
                prop_assert_eq!(canvas.get(x, y), f.rgb.get(x, y));
            }
        }
    }
}
