//! Physics-informed neural networks with a variance head.
//!
//! The crate is built bottom-up: [`diffcore`] provides expression graphs with
//! exact input derivatives and parameter gradients, [`mlp`] builds the
//! two-headed network on top of it, [`pde`] and [`sampler`] describe the
//! benchmark problems and their points, [`losses`] and [`optim`] define the
//! objective and the optimiser, and [`trainer`] runs experiments. [`oracle`]
//! holds independent checks and the Burgers reference solution, and
//! [`bench`] is the experiment harness behind the command line.

pub mod bench;
pub mod diffcore;
pub mod losses;
pub mod mlp;
pub mod optim;
pub mod oracle;
pub mod pde;
pub mod sampler;
pub mod trainer;
