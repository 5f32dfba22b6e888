pub mod baselines;
pub mod dataset;
pub mod evaluation;
pub mod geometry;
pub mod graph;
pub mod knowledge;
pub mod localiser;
pub mod metrics;
pub mod model;
pub mod ppn;
pub mod prediction;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;
