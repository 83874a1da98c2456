//! The chapters of the guide under `book/src`, compiled so their code
//! samples run as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/data-model.md")]
pub mod data_model {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/missingness.md")]
pub mod missingness {}

#[doc = include_str!("../../../book/src/cwgee.md")]
pub mod cwgee {}

#[doc = include_str!("../../../book/src/imputation.md")]
pub mod imputation {}

#[doc = include_str!("../../../book/src/pooling.md")]
pub mod pooling {}

#[doc = include_str!("../../../book/src/scenarios.md")]
pub mod scenarios {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
