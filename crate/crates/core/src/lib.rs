#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::type_complexity)]

pub mod error;
pub mod io;
pub mod lattice;
pub mod limit_sde;
pub mod master_eq;
pub mod model;
pub mod nash;
pub mod nplayer;
pub mod rng;
pub mod simplex;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
