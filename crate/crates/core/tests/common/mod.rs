#![allow(dead_code)]

use knolling::geometry::{OrientedRect, Vec2};
use knolling::scene::{GripperSpec, Scene};
use rand::Rng;

/// Point-in-rectangle from first principles: rotate into the rectangle frame.
pub fn inside(r: &OrientedRect, p: Vec2) -> bool {
    let (s, c) = r.pose.yaw.sin_cos();
    let (dx, dy) = (p.x - r.pose.x, p.y - r.pose.y);
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= 0.5 * r.extent.length && v.abs() <= 0.5 * r.extent.width
}

fn perimeter(r: &OrientedRect, h: f64) -> Vec<Vec2> {
    let (s, c) = r.pose.yaw.sin_cos();
    let (hl, hw) = (0.5 * r.extent.length, 0.5 * r.extent.width);
    let local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
    let world: Vec<Vec2> = local
        .iter()
        .map(|&(u, v)| Vec2::new(r.pose.x + c * u - s * v, r.pose.y + s * u + c * v))
        .collect();
    let mut pts = Vec::new();
    for i in 0..4 {
        let (a, b) = (world[i], world[(i + 1) % 4]);
        let n = (((b - a).norm() / h).ceil() as usize).max(1);
        for k in 0..n {
            pts.push(a + (b - a) * (k as f64 / n as f64));
        }
    }
    pts
}

/// Dense-sampling intersection: some boundary sample of one rectangle lies
/// in the other. Exact up to features thinner than `h`.
pub fn dense_intersects(a: &OrientedRect, b: &OrientedRect, h: f64) -> bool {
    perimeter(a, h).iter().any(|&p| inside(b, p)) || perimeter(b, h).iter().any(|&p| inside(a, p))
}

pub fn random_rect(rng: &mut impl Rng, spread: f64) -> OrientedRect {
    OrientedRect::new(
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
        rng.random_range(-4.0..4.0),
        rng.random_range(0.01..0.06),
        rng.random_range(0.01..0.06),
    )
    .unwrap()
}

/// The grasp rule written out independently of `Scene::graspable`: nothing on
/// top, narrow enough, and neither finger pad touching an object at the same
/// or a lower layer.
pub fn oracle_graspable(scene: &Scene, id: u32, g: &GripperSpec) -> bool {
    let obj = scene.objects.iter().find(|o| o.id == id).unwrap();
    if scene.objects.iter().any(|o| o.supported_by == Some(id)) {
        return false;
    }
    if obj.rect.extent.width > g.max_opening - 2.0 * g.clearance_margin {
        return false;
    }
    let (s, c) = obj.rect.pose.yaw.sin_cos();
    let off = 0.5 * obj.rect.extent.width + g.clearance_margin + 0.5 * g.finger_thickness;
    for sign in [1.0, -1.0] {
        let cx = obj.rect.pose.x - s * off * sign;
        let cy = obj.rect.pose.y + c * off * sign;
        let pad = OrientedRect::new(cx, cy, obj.rect.pose.yaw, g.finger_width, g.finger_thickness).unwrap();
        for o in &scene.objects {
            if o.id != id && o.z_layer <= obj.z_layer && dense_intersects(&pad, &o.rect, 2e-5) {
                return false;
            }
        }
    }
    true
}
