//! Command-line front end plus a simulated two-role web application and a
//! scenario runner for exercising the enforcing proxy end to end.

pub mod demo;
pub mod harness;
pub mod scenario;
