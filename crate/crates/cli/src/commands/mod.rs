pub mod eval;
pub mod gen_demos;
pub mod plot;
pub mod pretrain;
pub mod sweep;
pub mod train;
