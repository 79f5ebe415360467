pub mod asymptotics;
pub mod error;
pub mod family_spec;
pub mod fit;
pub mod io;
pub mod likelihood;
pub mod model;
pub mod optimize;
pub mod par;
pub mod predict;
pub mod quadrature;
pub mod ranef;
pub mod rng;
pub mod simlab;
pub mod special;
