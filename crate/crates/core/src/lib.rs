pub mod accounting;
pub mod adaptation;
pub mod bench;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod planted;
pub mod reasoning;
pub mod retrieval;
pub mod textfeat;
pub mod xadapter;

pub use error::{Error, Result};

// Compiles and runs the guide's snippets under `cargo test --doc`; one
// module per chapter so a failure names its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/adapters.md")]
    mod adapters {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/text-features.md")]
    mod text_features {}
    #[doc = include_str!("../../../book/src/adaptation.md")]
    mod adaptation {}
    #[doc = include_str!("../../../book/src/reasoning.md")]
    mod reasoning {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
