//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every primitive records its output value together with a closure that maps the
//! output gradient to gradients of its inputs. [`Tape::backward`] replays those
//! closures in reverse recording order. Nodes that cannot reach a trainable
//! parameter are recorded without a closure, so frozen sub-graphs cost nothing on
//! the way back.

mod ops;
mod tape;

pub use ops::{mse_loss, GatherMap, PoolMap};
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
mod tests;
