pub mod arch;
pub mod attacks;
pub mod cli;
mod hex;
pub mod instrument;
pub mod machine;
pub mod region;
pub mod space;
