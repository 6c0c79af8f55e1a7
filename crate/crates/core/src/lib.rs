pub mod autodiff;
pub mod dataset;
pub mod dsp;
pub mod losses;
pub mod parallel;
pub mod seed;
pub mod model;
pub mod ensemble;
pub mod metrics;
pub mod trainer;
pub mod pipeline;
