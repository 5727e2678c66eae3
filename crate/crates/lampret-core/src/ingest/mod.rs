//! Document producers: a simplified HTML parser, a seeded synthetic corpus
//! generator, and the line-oriented dataset format.

mod dataset;
mod html;
mod synth;

pub use dataset::{read_all, read_dataset, write_dataset, DatasetError, DatasetReader};
pub use html::{parse_html, HtmlError, ParseOutcome, ParseWarning};
pub use synth::{generate_synthetic, CorpusSpec};
