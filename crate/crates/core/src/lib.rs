pub mod autodiff;
pub mod cli;
pub mod data;
pub mod distillation;
pub mod metrics;
pub mod model;
pub mod tokenizer;
