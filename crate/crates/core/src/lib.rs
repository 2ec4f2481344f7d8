pub mod chance;
pub mod controllers;
pub mod datadriven;
pub mod estimation;
pub mod harness;
pub mod numerics;
pub mod plant;
