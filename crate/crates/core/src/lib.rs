// Negated float comparisons are deliberate: `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod corpus;
pub mod crf;
pub mod eval;
pub mod numgrad;
pub mod par;
pub mod synth;
pub mod taggers;
pub mod tokenizer;
