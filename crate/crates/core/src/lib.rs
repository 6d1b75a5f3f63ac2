//! Model predictive control for tracking over non-convex output sets.

pub mod harness;
pub mod mpct;
pub mod nlp;
pub mod numeric;
pub mod plant;
pub mod setgeom;
