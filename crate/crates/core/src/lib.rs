pub mod boxes;
pub mod params;
pub mod tensor;
pub mod priors;
pub mod vsm;
pub mod cmc;
pub mod setmatch;
pub mod infer;
pub mod eval;
pub mod synth;
pub mod model;
pub mod gradsuite;
