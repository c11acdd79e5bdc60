pub mod datasets;
pub mod eval;
pub mod hourglass;
pub mod imaging;
pub mod keypoints;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod transfer;
