use crate::image::{dilate, erode, LabelMap, Mask};

/// Binary training targets derived from an instance map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetPair {
    pub nuclei: Mask,
    pub contour: Mask,
}

/// Bounding boxes `(x0, y0, x1, y1)` per label, index 0 unused.
pub(crate) fn bounding_boxes(labels: &LabelMap) -> Vec<Option<(usize, usize, usize, usize)>> {
    let mut boxes = vec![None; labels.max_label() as usize + 1];
    for y in 0..labels.height() {
        for x in 0..labels.width() {
            let l = labels.get(x, y) as usize;
            if l == 0 {
                continue;
            }
            let b = boxes[l].get_or_insert((x, y, x, y));
            b.0 = b.0.min(x);
            b.1 = b.1.min(y);
            b.2 = b.2.max(x);
            b.3 = b.3.max(y);
        }
    }
    boxes
}

/// Contour band: pixels within Chebyshev distance `r` of an instance
/// boundary, on either side. Nuclei mask: instance support minus the band.
pub fn extract_targets(labels: &LabelMap, r: usize) -> TargetPair {
    let (w, h) = (labels.width(), labels.height());
    let mut contour = Mask::new(w, h);
    for (l, bbox) in bounding_boxes(labels).into_iter().enumerate() {
        let Some((x0, y0, x1, y1)) = bbox else { continue };
        let (cx0, cy0) = (x0.saturating_sub(r), y0.saturating_sub(r));
        let (cx1, cy1) = ((x1 + r).min(w - 1), (y1 + r).min(h - 1));
        let (cw, ch) = (cx1 - cx0 + 1, cy1 - cy0 + 1);
        let local = Mask::from_fn(cw, ch, |x, y| labels.get(cx0 + x, cy0 + y) == l as u32);
        let outer = dilate(&local, r);
        let inner = erode(&local, r);
        for y in 0..ch {
            for x in 0..cw {
                if outer.get(x, y) && !inner.get(x, y) {
                    contour.set(cx0 + x, cy0 + y, true);
                }
            }
        }
    }
    let nuclei = Mask::from_fn(w, h, |x, y| labels.get(x, y) > 0 && !contour.get(x, y));
    TargetPair { nuclei, contour }
}
