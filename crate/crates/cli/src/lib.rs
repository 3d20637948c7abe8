//! Frontend, pipeline driver, reporting, and bundled kernel corpora
//! for the Einstein-notation kernel compiler.

pub mod cc;
pub mod corpus;
pub mod parse;
pub mod pipeline;
pub mod report;
pub mod sppfile;
