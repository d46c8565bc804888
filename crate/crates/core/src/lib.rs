pub mod geom;
pub mod io;
pub mod physics;
pub mod features;
pub mod scenes;
pub mod learn;
pub mod eval;
pub mod pipeline;
