pub mod classifiers;
pub mod corpus;
pub mod evalkit;
pub mod generator;
pub mod jscw;
pub mod objectives;
pub mod runner;
pub mod substrate;
