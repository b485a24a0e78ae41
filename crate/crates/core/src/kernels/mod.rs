//! Depth-prior stack and depth-conditioned feature modulation.

mod dck;
mod msdp;

pub use dck::{
    dck_backward, dck_generate, dck_generate_backward, dck_modulate, dck_modulate_backward,
    DckConfig, DckGenCache, DckGrads, DckParams, KernelField,
};
pub use msdp::{msdp_backward, msdp_forward, MsdpLevel, MsdpLevelCache, MsdpOutput, MsdpParams};
