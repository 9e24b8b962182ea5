//! Domain types shared across the crate: bounding boxes, detections,
//! per-frame object lists and clips.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TypeError {
    #[error("invalid box: left={left} top={top} right={right} bottom={bottom} conf={confidence}")]
    InvalidBox {
        left: f64,
        top: f64,
        right: f64,
        bottom: f64,
        confidence: f64,
    },
    #[error("frame {frame}: {msg}")]
    InvalidFrame { frame: usize, msg: String },
    #[error("invalid clip: {0}")]
    InvalidClip(String),
}

/// Axis-aligned bounding box in pixel coordinates with a detector confidence.
///
/// Stored as (left, top, right, bottom); width/height conventions are
/// converted at the text-format boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
    pub confidence: f64,
}

impl Box2D {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64, confidence: f64) -> Result<Self, TypeError> {
        let ok = right > left
            && bottom > top
            && (0.0..=1.0).contains(&confidence)
            && [left, top, right, bottom].iter().all(|v| v.is_finite());
        if !ok {
            return Err(TypeError::InvalidBox {
                left,
                top,
                right,
                bottom,
                confidence,
            });
        }
        Ok(Box2D {
            left,
            top,
            right,
            bottom,
            confidence,
        })
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.left + self.right),
            0.5 * (self.top + self.bottom),
        )
    }
}

/// Intersection over union of two boxes; 0 when disjoint.
pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    let iw = (a.right.min(b.right) - a.left.max(b.left)).max(0.0);
    let ih = (a.bottom.min(b.bottom) - a.top.max(b.top)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// One localized object in one frame. Every frame additionally carries a
/// synthetic `null` detection (no box, no appearance) that absorbs objects
/// which become invisible.
///
/// `gt_identity` is populated by the simulator and by ground-truth file
/// ingestion only; model and loss code never reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub local_index: usize,
    pub bbox: Option<Box2D>,
    pub appearance: Option<Vec<f64>>,
    pub is_null: bool,
    pub gt_identity: Option<i64>,
}

impl Detection {
    pub fn real(
        frame: usize,
        local_index: usize,
        bbox: Box2D,
        appearance: Option<Vec<f64>>,
        gt_identity: Option<i64>,
    ) -> Self {
        Detection {
            frame,
            local_index,
            bbox: Some(bbox),
            appearance,
            is_null: false,
            gt_identity,
        }
    }

    pub fn null(frame: usize, local_index: usize) -> Self {
        Detection {
            frame,
            local_index,
            bbox: None,
            appearance: None,
            is_null: true,
            gt_identity: None,
        }
    }
}

/// All detections of one frame, null object last.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObjects {
    pub frame: usize,
    pub detections: Vec<Detection>,
}

impl FrameObjects {
    /// Builds a frame from its real detections; the null object is appended
    /// and local indices are rewritten to list positions.
    pub fn from_real(frame: usize, real: Vec<Detection>) -> Result<Self, TypeError> {
        let mut detections = real;
        for d in &detections {
            if d.is_null {
                return Err(TypeError::InvalidFrame {
                    frame,
                    msg: "null detection passed where a real one was expected".into(),
                });
            }
            if d.bbox.is_none() {
                return Err(TypeError::InvalidFrame {
                    frame,
                    msg: "real detection without a box".into(),
                });
            }
        }
        let null_index = detections.len();
        detections.push(Detection::null(frame, null_index));
        for (i, d) in detections.iter_mut().enumerate() {
            d.frame = frame;
            d.local_index = i;
        }
        Ok(FrameObjects { frame, detections })
    }

    /// Total object count including the null object.
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Count of real (non-null) objects.
    pub fn real_count(&self) -> usize {
        self.detections.len() - 1
    }

    /// Index of the null object (always the last slot).
    pub fn null_index(&self) -> usize {
        self.detections.len() - 1
    }

    pub fn real_detections(&self) -> &[Detection] {
        &self.detections[..self.real_count()]
    }
}

/// A contiguous run of frames; the training unit.
#[derive(Debug, Clone)]
pub struct Clip {
    pub frames: Vec<FrameObjects>,
}

impl Clip {
    pub fn new(frames: Vec<FrameObjects>) -> Result<Self, TypeError> {
        if frames.len() < 2 {
            return Err(TypeError::InvalidClip(format!(
                "need at least 2 frames, got {}",
                frames.len()
            )));
        }
        for w in frames.windows(2) {
            if w[1].frame != w[0].frame + 1 {
                return Err(TypeError::InvalidClip(format!(
                    "frame indices must be contiguous: {} then {}",
                    w[0].frame, w[1].frame
                )));
            }
        }
        Ok(Clip { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn first_frame(&self) -> usize {
        self.frames[0].frame
    }

    /// Frame objects by absolute frame index.
    pub fn frame(&self, frame: usize) -> &FrameObjects {
        &self.frames[frame - self.first_frame()]
    }

    /// Mean number of real objects per frame.
    pub fn mean_real_objects(&self) -> f64 {
        let total: usize = self.frames.iter().map(|f| f.real_count()).sum();
        total as f64 / self.frames.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(l: f64, t: f64, r: f64, b: f64) -> Box2D {
        Box2D::new(l, t, r, b, 1.0).unwrap()
    }

    #[test]
    fn box_invariants_rejected() {
        assert!(Box2D::new(1.0, 0.0, 1.0, 2.0, 1.0).is_err()); // zero width
        assert!(Box2D::new(0.0, 2.0, 1.0, 1.0, 1.0).is_err()); // inverted
        assert!(Box2D::new(0.0, 0.0, 1.0, 1.0, 1.5).is_err()); // conf > 1
        assert!(Box2D::new(0.0, 0.0, f64::NAN, 1.0, 0.5).is_err());
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        let far = bx(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &far), 0.0);
    }

    #[test]
    fn iou_half_overlap_unit_squares() {
        // intersection 0.5, union 1.5
        let a = bx(0.0, 0.0, 1.0, 1.0);
        let b = bx(0.5, 0.0, 1.5, 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_symmetric() {
        let a = bx(0.0, 0.0, 2.0, 3.0);
        let b = bx(1.0, 1.0, 4.0, 2.5);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn frame_appends_null_last() {
        let d = Detection::real(3, 0, bx(0.0, 0.0, 1.0, 1.0), None, Some(7));
        let f = FrameObjects::from_real(3, vec![d]).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f.real_count(), 1);
        assert!(f.detections[1].is_null);
        assert_eq!(f.null_index(), 1);
        assert_eq!(f.detections[0].local_index, 0);
    }

    #[test]
    fn clip_rejects_gaps() {
        let f1 = FrameObjects::from_real(1, vec![]).unwrap();
        let f3 = FrameObjects::from_real(3, vec![]).unwrap();
        assert!(Clip::new(vec![f1, f3]).is_err());
    }

    #[test]
    fn clip_rejects_short() {
        let f1 = FrameObjects::from_real(1, vec![]).unwrap();
        assert!(Clip::new(vec![f1]).is_err());
    }
}
