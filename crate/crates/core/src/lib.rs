//! Deterministic discrete-event simulation of straggler-tolerant distributed
//! training on parameter-server and ring all-reduce clusters.

pub mod cli;
pub mod decision;
pub mod io;
mod lstsq;
pub mod model;
pub mod predictor;
pub mod prevention;
pub mod resource;
pub mod sim;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/modes.md")]
    mod modes {}
    #[doc = include_str!("../../../book/src/prediction.md")]
    mod prediction {}
    #[doc = include_str!("../../../book/src/prevention.md")]
    mod prevention {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
