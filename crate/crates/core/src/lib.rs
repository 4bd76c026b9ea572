pub mod error;
pub mod ids;
pub mod mem;
pub mod xpt;
pub mod kernel;
pub mod covert;
pub mod primitives;
pub mod side;
pub mod experiments;
