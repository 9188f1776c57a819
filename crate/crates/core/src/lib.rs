pub mod adapter;
pub mod archive;
pub mod dataset;
pub mod decode;
pub mod hparams;
pub mod logits;
pub mod matrix;
pub mod metrics;
pub mod parser;
pub mod pipeline;
pub mod quant;
pub mod question;
pub mod router;
pub mod task;
pub mod text;
