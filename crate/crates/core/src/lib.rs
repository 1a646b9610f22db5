pub mod benchio;
pub mod composer;
pub mod denoisers;
pub mod diffusion;
pub mod metrics;
pub mod pose_geometry;
pub mod prompting;
pub mod tensor;
