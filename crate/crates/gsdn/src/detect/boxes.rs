use serde::{Deserialize, Serialize};

/// Axis-aligned box in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub class_id: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    #[serde(default = "one")]
    pub score: f64,
}

fn one() -> f64 {
    1.0
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], class_id: usize, score: f64) -> Self {
        Self {
            class_id,
            center,
            size,
            score,
        }
    }

    pub fn min(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.center[i] - 0.5 * self.size[i])
    }

    pub fn max(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.center[i] + 0.5 * self.size[i])
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    pub fn is_valid(&self) -> bool {
        self.size.iter().all(|&s| s > 0.0 && s.is_finite()) && self.center.iter().all(|c| c.is_finite())
    }

    pub fn translated(&self, d: [f64; 3]) -> Self {
        Self {
            center: [0, 1, 2].map(|i| self.center[i] + d[i]),
            ..*self
        }
    }
}

/// Volumetric intersection over union of two axis-aligned boxes.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let mut inter = 1.0;
    for i in 0..3 {
        let lo = (a.center[i] - 0.5 * a.size[i]).max(b.center[i] - 0.5 * b.size[i]);
        let hi = (a.center[i] + 0.5 * a.size[i]).min(b.center[i] + 0.5 * b.size[i]);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Regression target of `gt` relative to `anchor`: center offsets scaled by
/// the anchor size, then log size ratios.
pub fn encode_box(gt: &Box3D, anchor: &Box3D) -> [f64; 6] {
    let mut t = [0.0; 6];
    for i in 0..3 {
        t[i] = (gt.center[i] - anchor.center[i]) / anchor.size[i];
        t[3 + i] = (gt.size[i] / anchor.size[i]).ln();
    }
    t
}

pub fn decode_box(offsets: &[f64; 6], anchor: &Box3D) -> Box3D {
    let mut b = *anchor;
    for i in 0..3 {
        b.center[i] = anchor.center[i] + offsets[i] * anchor.size[i];
        b.size[i] = anchor.size[i] * offsets[3 + i].exp();
    }
    b
}
