pub mod audit;
pub mod geometry;
pub mod rng;
pub mod spatial;
pub mod stats;
pub mod timebase;
pub mod temporal;
pub mod links;
pub mod plant;
pub mod registration;
pub mod safety;
pub mod sut;
pub mod orchestrator;
