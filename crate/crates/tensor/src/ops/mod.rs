mod conv;
pub(crate) mod elementwise;
mod layout;
pub(crate) mod matmul;
pub(crate) mod norm;
mod pool;
mod reduce;
mod scan;
