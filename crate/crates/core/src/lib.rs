pub mod audio_io;
mod dsp;
pub mod preprocess;
pub mod features;
pub mod hmm;
pub mod knn;
pub mod synthetic;
pub mod harness;
