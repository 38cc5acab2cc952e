pub mod conv;
mod elementwise;
mod matmul;
mod norm;
pub mod shape;
