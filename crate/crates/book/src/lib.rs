//! Compiles the chapters of the guide in `book/` so that their code listings
//! run as doc-tests.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}
#[doc = include_str!("../../../book/src/field.md")]
pub mod field {}
#[doc = include_str!("../../../book/src/chaos.md")]
pub mod chaos {}
#[doc = include_str!("../../../book/src/cascade.md")]
pub mod cascade {}
#[doc = include_str!("../../../book/src/spine.md")]
pub mod spine {}
#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}
