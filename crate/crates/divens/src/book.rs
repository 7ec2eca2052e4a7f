//! Keeps the guide's code snippets compiling.
//!
//! Every chapter of the book under `book/src/` is included here as a
//! doc comment, so `cargo test --doc` runs each of its Rust fences.
//! A snippet that drifts out of sync with the API fails the build
//! instead of rotting in the prose.

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/tensors-and-tape.md")]
mod tensors_and_tape {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/ensembles.md")]
mod ensembles {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/diversity.md")]
mod diversity {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/training.md")]
mod training {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/attacks.md")]
mod attacks {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/evaluation.md")]
mod evaluation {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/theory.md")]
mod theory {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod cli {}
