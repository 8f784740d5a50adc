//! The user guide, one chapter per module of the rendered book under
//! `book/`. Each chapter is included verbatim, so every code block in the
//! book compiles and runs as a documentation test of this crate and the
//! guide cannot drift from the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/networks.md")]
pub mod networks {}

#[doc = include_str!("../../../book/src/costs.md")]
pub mod costs {}

#[doc = include_str!("../../../book/src/regularizers.md")]
pub mod regularizers {}

#[doc = include_str!("../../../book/src/algorithm.md")]
pub mod algorithm {}

#[doc = include_str!("../../../book/src/certificates.md")]
pub mod certificates {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
