pub mod ablation;
pub mod acoustic;
pub mod config;
pub mod exec;
pub mod fusion;
pub mod hypotheses;
pub mod init_bridge;
pub mod io;
pub mod lm;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod pretrain;
pub mod prompt;
pub mod seed;
pub mod synth;
pub mod tokenizer;
pub mod train;
