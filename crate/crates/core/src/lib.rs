//! Simulated tabletop tidying: a geometric grasp oracle that labels its own
//! training data, a recurrent graspability classifier, an autoregressive
//! placement planner with a mixture-density head, and a controller that
//! separates piles before arranging them.

pub mod checks;
pub mod controller;
pub mod dataset;
pub mod exec;
pub mod gem;
pub mod geometry;
pub mod knoll;
pub mod nn;
pub mod perception;
pub mod render;
pub mod scene;
pub mod util;
