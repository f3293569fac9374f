pub mod manifest;
pub mod metadata;
pub mod samples;
pub mod shuffle;
pub mod vocab;
pub mod imaging;
pub mod nn;
pub mod model;
pub mod checkpoint;
pub mod train;
pub mod eval;
pub mod synth;
pub mod pipeline;
