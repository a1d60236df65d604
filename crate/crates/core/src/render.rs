//! Static SVG frames of scenes and episodes.

use std::collections::HashMap;
use std::fmt::Write;

use crate::controller::{EpisodeLog, ObjectPrediction};
use crate::gem::GEM_THRESHOLD;
use crate::scene::{GripperSpec, Scene};

/// Pixels per metre.
pub const SCALE: f64 = 1000.0;
const GREEN: &str = "#3a9d4a";
const RED: &str = "#d0453a";
const GREY: &str = "#9a9a9a";

/// Per-object values shown on a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub graspable: bool,
    pub confidence: Option<f64>,
}

/// Annotations from GEM predictions.
pub fn from_predictions(preds: &[ObjectPrediction]) -> HashMap<u32, Annotation> {
    preds
        .iter()
        .map(|p| {
            (
                p.id,
                Annotation {
                    graspable: p.p_graspable >= GEM_THRESHOLD,
                    confidence: Some(p.state.confidence),
                },
            )
        })
        .collect()
}

/// Annotations from the grasp oracle, without confidences.
pub fn from_oracle(scene: &Scene, gripper: &GripperSpec) -> HashMap<u32, Annotation> {
    scene
        .objects
        .iter()
        .map(|o| {
            (
                o.id,
                Annotation {
                    graspable: scene.graspable(o.id, gripper).unwrap_or(false),
                    confidence: None,
                },
            )
        })
        .collect()
}

/// One `<rect>` for the workspace frame and one per object, lower layers first.
pub fn render_scene(scene: &Scene, notes: &HashMap<u32, Annotation>, title: &str) -> String {
    let ws = scene.workspace;
    let w = (ws.x_max - ws.x_min) * SCALE;
    let h = (ws.y_max - ws.y_min) * SCALE;
    // table x grows up the page, y grows to the left
    let px = |y: f64| (ws.y_max - y) * SCALE;
    let py = |x: f64| (ws.x_max - x) * SCALE;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{h:.0}" height="{w:.0}" viewBox="0 0 {h:.3} {w:.3}">"#
    );
    let _ = writeln!(s, "<title>{}</title>", escape(title));
    let _ = writeln!(
        s,
        r##"<rect class="workspace" x="0" y="0" width="{h:.3}" height="{w:.3}" fill="#f4f1ea" stroke="#444" stroke-width="2"/>"##
    );
    let mut objs: Vec<_> = scene.objects.iter().collect();
    objs.sort_by_key(|o| (o.z_layer, o.id));
    for o in &objs {
        let r = o.rect;
        let (cx, cy) = (px(r.pose.y), py(r.pose.x));
        let (len, wid) = (r.extent.length * SCALE, r.extent.width * SCALE);
        // length runs along table x, which is screen -y
        let deg = -(r.pose.yaw.to_degrees()) - 90.0;
        let note = notes.get(&o.id);
        let fill = match note {
            Some(a) if a.graspable => GREEN,
            Some(_) => RED,
            None => GREY,
        };
        let _ = writeln!(
            s,
            r#"<rect class="object" data-id="{}" data-layer="{}" x="{:.3}" y="{:.3}" width="{len:.3}" height="{wid:.3}" transform="rotate({deg:.4} {cx:.3} {cy:.3})" fill="{fill}" fill-opacity="0.75" stroke="black" stroke-width="1"/>"#,
            o.id,
            o.z_layer,
            cx - len / 2.0,
            cy - wid / 2.0,
        );
        let label = match note.and_then(|a| a.confidence) {
            Some(c) => format!("{} ({c:.2})", o.id),
            None => o.id.to_string(),
        };
        let _ = writeln!(
            s,
            r#"<text x="{cx:.3}" y="{:.3}" font-size="10" text-anchor="middle" font-family="monospace">{label}</text>"#,
            cy + 3.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One frame per log entry (scene before the action) plus the final scene.
/// Frames reuse the latest observation's predictions.
pub fn render_episode(log: &EpisodeLog) -> Vec<String> {
    let mut frames = Vec::with_capacity(log.entries.len() + 1);
    let mut notes = HashMap::new();
    for (i, e) in log.entries.iter().enumerate() {
        if let Some(obs) = &e.observation {
            notes = from_predictions(obs);
        }
        frames.push(render_scene(&e.scene, &notes, &format!("step {i}: {} -> {:?}", e.action.kind(), e.outcome)));
    }
    frames.push(render_scene(&log.final_scene, &notes, &format!("final: {:?}", log.status)));
    frames
}

/// Counts `<rect` elements, for checks on rendered output.
pub fn count_rects(svg: &str) -> usize {
    svg.matches("<rect").count()
}
