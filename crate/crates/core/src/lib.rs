pub mod autodiff;
pub mod cli;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod scene;
pub mod siren;
pub mod trainer;
