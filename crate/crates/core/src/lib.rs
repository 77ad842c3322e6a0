// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod evaluate;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod synthdata;
pub mod trainer;
