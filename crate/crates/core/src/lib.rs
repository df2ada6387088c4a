pub mod annotations;
pub mod classifier;
pub mod dataset;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod synthgen;
pub mod training;
