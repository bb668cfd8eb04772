pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod modality;
pub mod losses;
pub mod segmentor;

pub use error::{AnysegError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/segmentor.md")]
    mod segmentor {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/synthetic_data.md")]
    mod synthetic_data {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
