pub mod augment;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod fsutil;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod models;
pub mod pseudolabel;
pub mod seeds;
pub mod synthdata;
pub mod trainer;
