// `!(a > b)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dynamics;
pub mod estimators;
pub mod excitation;
pub mod linalg;
pub mod oracle;
pub mod regret;
