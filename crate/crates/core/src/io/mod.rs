pub mod checkpoint;
pub mod eval;
pub mod image;
pub mod log;
pub mod obj;
pub mod reference;
pub mod scene;
pub mod synth;
