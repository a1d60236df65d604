//! Synthetic stand-in for the keypoint detector.
//!
//! Each object yields one four-keypoint detection and a confidence score.
//! Occluded objects (something stacked on them) are seen as a blend of their
//! own footprint and the footprint of the whole pile, and lose confidence;
//! crowded objects lose confidence too.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    clearance, corners, fit_rect, min_area_rect, overlap_area, wrap_angle, GeometryError,
    KeypointQuad, OrientedRect, Vec2,
};
use crate::scene::{Scene, SceneObject};
use crate::util::rng_from;
use std::f64::consts::{FRAC_PI_2, PI};

pub const CONF_MIN: f64 = 0.05;
pub const CONF_MAX: f64 = 0.999;
/// Clearance below which an object counts as crowded.
pub const CROWDING_SCALE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionConfig {
    pub keypoint_noise_sigma: f64,
    pub conf_base: f64,
    pub k_occ: f64,
    pub k_prox: f64,
    pub conf_noise_sigma: f64,
    pub seed: u64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            keypoint_noise_sigma: 0.0015,
            conf_base: 0.95,
            k_occ: 0.6,
            k_prox: 0.15,
            conf_noise_sigma: 0.03,
            seed: 0,
        }
    }
}

impl PerceptionConfig {
    pub fn noiseless() -> Self {
        Self {
            keypoint_noise_sigma: 0.0,
            conf_noise_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.keypoint_noise_sigma >= 0.0 && self.conf_noise_sigma >= 0.0) {
            return Err("noise sigmas must be non-negative".into());
        }
        if !(self.conf_base > 0.0 && self.conf_base <= 1.0) {
            return Err("conf_base must lie in (0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub id: u32,
    pub quad: KeypointQuad,
    pub confidence: f64,
}

/// The six per-object model features, in model input order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub width: f64,
    pub length: f64,
    pub confidence: f64,
}

pub const N_FEATURES: usize = 6;

impl ObjectState {
    pub fn from_rect(rect: &OrientedRect, confidence: f64) -> Self {
        Self {
            x: rect.pose.x,
            y: rect.pose.y,
            yaw: rect.pose.yaw,
            width: rect.extent.width,
            length: rect.extent.length,
            confidence,
        }
    }

    pub fn features(&self) -> [f64; N_FEATURES] {
        [self.x, self.y, self.yaw, self.width, self.length, self.confidence]
    }

    pub fn rect(&self) -> Result<OrientedRect, GeometryError> {
        OrientedRect::new(self.x, self.y, self.yaw, self.length, self.width)
    }
}

/// Fraction of `obj`'s footprint covered by whatever rests on it.
pub fn occlusion_fraction(scene: &Scene, obj: &SceneObject) -> f64 {
    scene
        .objects
        .iter()
        .filter(|o| o.supported_by == Some(obj.id))
        .map(|o| overlap_area(&obj.rect, &o.rect))
        .sum::<f64>()
        .min(obj.rect.area())
        / obj.rect.area()
}

/// `max(0, 1 - nearest clearance / 0.02 m)`; zero for a lone object.
pub fn crowding(scene: &Scene, obj: &SceneObject) -> f64 {
    let nearest = scene
        .objects
        .iter()
        .filter(|o| o.id != obj.id)
        .map(|o| clearance(&obj.rect, &o.rect))
        .fold(f64::INFINITY, f64::min);
    (1.0 - nearest / CROWDING_SCALE).max(0.0)
}

/// Rectangle interpolated between `own` and `pile` by `t`, taking the
/// representation of `pile` whose yaw is nearest `own`.
pub fn blend_rect(own: &OrientedRect, pile: &OrientedRect, t: f64) -> OrientedRect {
    let yaw0 = own.pose.yaw;
    // Two ways to describe `pile`: as is, or with sides swapped and yaw + pi/2.
    let cands = [
        (pile.pose.yaw, pile.extent.length, pile.extent.width),
        (pile.pose.yaw + FRAC_PI_2, pile.extent.width, pile.extent.length),
    ];
    let delta = |y: f64| {
        let d = wrap_angle(y - yaw0, PI);
        if d > FRAC_PI_2 {
            d - PI
        } else {
            d
        }
    };
    let (pyaw, pl, pw) = cands
        .into_iter()
        .min_by(|a, b| delta(a.0).abs().total_cmp(&delta(b.0).abs()))
        .unwrap();
    let lerp = |a: f64, b: f64| a + (b - a) * t;
    let c = own.center() + (pile.center() - own.center()) * t;
    OrientedRect::new(
        c.x,
        c.y,
        yaw0 + delta(pyaw) * t,
        lerp(own.extent.length, pl),
        lerp(own.extent.width, pw),
    )
    .expect("blend of valid rectangles is valid")
}

/// Noise-free perceived footprint of `obj`.
pub fn perceived_rect(scene: &Scene, obj: &SceneObject) -> OrientedRect {
    let occ = occlusion_fraction(scene, obj);
    if occ <= 0.0 {
        return obj.rect;
    }
    let mut pts: Vec<Vec2> = obj.rect.corners().0.to_vec();
    for top in scene.objects.iter().filter(|o| o.supported_by == Some(obj.id)) {
        pts.extend_from_slice(&top.rect.corners().0);
    }
    let pile = min_area_rect(&pts).unwrap_or(obj.rect);
    blend_rect(&obj.rect, &pile, occ)
}

pub fn observe(scene: &Scene, cfg: &PerceptionConfig) -> Vec<Detection> {
    let mut rng = rng_from(cfg.seed, &[scene.seed, 0x0B5E]);
    let kp = Normal::new(0.0, cfg.keypoint_noise_sigma.max(0.0)).expect("finite sigma");
    let cn = Normal::new(0.0, cfg.conf_noise_sigma.max(0.0)).expect("finite sigma");
    scene
        .objects
        .iter()
        .map(|obj| {
            let mut quad = corners(&perceived_rect(scene, obj));
            for p in quad.0.iter_mut() {
                p.x += kp.sample(&mut rng);
                p.y += kp.sample(&mut rng);
            }
            let raw = cfg.conf_base
                - cfg.k_occ * occlusion_fraction(scene, obj)
                - cfg.k_prox * crowding(scene, obj)
                + cn.sample(&mut rng);
            Detection {
                id: obj.id,
                quad,
                confidence: raw.clamp(CONF_MIN, CONF_MAX),
            }
        })
        .collect()
}

pub fn to_state(d: &Detection) -> Result<ObjectState, GeometryError> {
    Ok(ObjectState::from_rect(&fit_rect(&d.quad)?, d.confidence))
}

/// Observes and converts every detection. Detections whose quads are
/// degenerate are reported as errors.
pub fn observe_states(
    scene: &Scene,
    cfg: &PerceptionConfig,
) -> Result<Vec<(u32, ObjectState)>, GeometryError> {
    observe(scene, cfg)
        .iter()
        .map(|d| to_state(d).map(|s| (d.id, s)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::yaw_distance;
    use crate::scene::{generate_scene, SceneGenConfig, Workspace};

    fn obj(id: u32, x: f64, y: f64, yaw: f64, l: f64, w: f64) -> SceneObject {
        SceneObject {
            id,
            rect: OrientedRect::new(x, y, yaw, l, w).unwrap(),
            z_layer: 0,
            supported_by: None,
            color_tag: 0,
        }
    }

    fn stacked(base: SceneObject, mut top: SceneObject) -> Scene {
        top.z_layer = 1;
        top.supported_by = Some(base.id);
        let mut s = Scene::empty(Workspace::default(), 1);
        s.objects = vec![base, top];
        s.validate().unwrap();
        s
    }

    #[test]
    fn noiseless_unoccluded_is_exact() {
        let mut s = Scene::empty(Workspace::default(), 4);
        s.objects = vec![obj(0, 0.2, 0.1, 0.7, 0.05, 0.03), obj(1, 0.4, -0.1, 2.0, 0.03, 0.03)];
        let det = observe(&s, &PerceptionConfig::noiseless());
        assert_eq!(det.len(), 2);
        for (d, o) in det.iter().zip(&s.objects) {
            let st = to_state(d).unwrap();
            assert!((st.x - o.rect.pose.x).abs() < 1e-9);
            assert!((st.y - o.rect.pose.y).abs() < 1e-9);
            assert!(yaw_distance(st.yaw, o.rect.pose.yaw) < 1e-9);
            assert!((st.length - o.rect.extent.length).abs() < 1e-9);
            assert!((st.width - o.rect.extent.width).abs() < 1e-9);
            assert!((st.confidence - 0.95).abs() < 1e-12);
        }
        // the square keeps its tie-broken yaw
        assert!(to_state(&det[1]).unwrap().yaw < FRAC_PI_2);
    }

    #[test]
    fn full_occlusion_lowers_confidence() {
        // top covers the base completely
        let s = stacked(obj(0, 0.3, 0.0, 0.0, 0.04, 0.03), obj(1, 0.3, 0.0, 0.0, 0.045, 0.035));
        let base = &s.objects[0];
        assert!((occlusion_fraction(&s, base) - 1.0).abs() < 1e-12);
        let cfg = PerceptionConfig {
            k_occ: 0.5,
            ..PerceptionConfig::noiseless()
        };
        let d = observe(&s, &cfg);
        assert!(d[0].confidence <= cfg.conf_base - 0.5 + 1e-12);
        assert!(d[0].confidence >= CONF_MIN);
    }

    #[test]
    fn confidence_clamped() {
        let s = stacked(obj(0, 0.3, 0.0, 0.0, 0.04, 0.03), obj(1, 0.3, 0.0, 0.0, 0.045, 0.035));
        let low = PerceptionConfig {
            k_occ: 5.0,
            k_prox: 0.0,
            ..PerceptionConfig::noiseless()
        };
        assert_eq!(observe(&s, &low)[0].confidence, CONF_MIN);
        let high = PerceptionConfig {
            conf_base: 1.0,
            k_occ: 0.0,
            k_prox: -10.0,
            ..PerceptionConfig::noiseless()
        };
        assert!(observe(&s, &high).iter().all(|d| d.confidence == CONF_MAX));
    }

    #[test]
    fn stacked_base_seen_as_blend_with_pile() {
        let s = stacked(obj(0, 0.3, 0.0, 0.0, 0.04, 0.03), obj(1, 0.31, 0.005, 0.5, 0.04, 0.02));
        let (base, top) = (&s.objects[0], &s.objects[1]);
        let occ = occlusion_fraction(&s, base);
        assert!(occ > 0.3 && occ < 1.0);
        // pile rectangle by brute-force angle scan
        let mut pts = base.rect.corners().0.to_vec();
        pts.extend_from_slice(&top.rect.corners().0);
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..200_000 {
            let th = k as f64 * FRAC_PI_2 / 200_000.0;
            let (u, v) = (Vec2::from_angle(th), Vec2::from_angle(th).perp());
            let span = |a: Vec2| {
                let (lo, hi) = pts
                    .iter()
                    .map(|p| p.dot(a))
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), t| (l.min(t), h.max(t)));
                hi - lo
            };
            let area = span(u) * span(v);
            if area < best.0 {
                best = (area, th);
            }
        }
        let pile = min_area_rect(&pts).unwrap();
        assert!((pile.area() - best.0).abs() < 1e-9);

        let d = observe(&s, &PerceptionConfig::noiseless());
        let seen = to_state(&d[0]).unwrap();
        let expect = blend_rect(&base.rect, &pile, occ);
        assert!((seen.length - expect.extent.length).abs() < 1e-9);
        assert!((seen.width - expect.extent.width).abs() < 1e-9);
        // perceived dims deviate from truth by the interpolated amount
        let (pl, pw) = if yaw_distance(pile.pose.yaw, base.rect.pose.yaw) <= std::f64::consts::FRAC_PI_4 {
            (pile.extent.length, pile.extent.width)
        } else {
            (pile.extent.width, pile.extent.length)
        };
        let dl = seen.length - base.rect.extent.length;
        let dw = seen.width - base.rect.extent.width;
        assert!((dl - occ * (pl - base.rect.extent.length)).abs() < 1e-9);
        assert!((dw - occ * (pw - base.rect.extent.width)).abs() < 1e-9);
        assert!(dl.abs() + dw.abs() > 1e-3);
    }

    #[test]
    fn confidence_monotone_in_occlusion() {
        let cfg = PerceptionConfig::noiseless();
        let mut last = f64::INFINITY;
        // slide the top off the base: occlusion decreases, so walk it backwards
        for k in (0..=10).rev() {
            let dx = 0.001 * k as f64;
            let s = stacked(obj(0, 0.3, 0.0, 0.0, 0.05, 0.03), obj(1, 0.3 + dx, 0.0, 0.0, 0.04, 0.03));
            let c = observe(&s, &cfg)[0].confidence;
            assert!(c <= last + 1e-15);
            last = c;
        }
    }

    #[test]
    fn deterministic_and_one_per_object() {
        for seed in 0..20 {
            let s = generate_scene(&SceneGenConfig {
                seed,
                p_stack: 0.5,
                ..Default::default()
            })
            .unwrap();
            let cfg = PerceptionConfig::default().with_seed(seed);
            let a = observe(&s, &cfg);
            assert_eq!(a.len(), s.len());
            assert_eq!(a, observe(&s, &cfg));
            for d in &a {
                assert!((CONF_MIN..=CONF_MAX).contains(&d.confidence));
            }
        }
    }
}
