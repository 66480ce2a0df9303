//! Static half of the toolkit: PHP tokenizer, sink/taint scanner,
//! php.ini audit and report rendering.

pub mod lexer;
pub mod checklist;
pub mod analyzer;
pub mod config_audit;
pub mod report;
