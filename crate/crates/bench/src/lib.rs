//! Shared inputs for the benchmarks.

use amips_core::nets::sizing::ReinjectPolicy;
use amips_core::nets::{Family, NetSpec};
use amips_core::synth::{mixture, Mixture, MixtureConfig};

/// The synthetic fixture at its default size.
pub fn fixture() -> Mixture {
    mixture(&MixtureConfig::default()).expect("default mixture is valid")
}

/// Depth-4 residual network with input re-injection at every layer.
pub fn matched_spec(family: Family, width: usize, dim: usize) -> NetSpec {
    let mut s = NetSpec::new(family, 4, width, dim, 1);
    s.reinject = ReinjectPolicy::EveryLayer.count(4);
    s.residual = true;
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matched_specs_are_valid() {
        for f in [Family::SupportNet, Family::KeyNet] {
            matched_spec(f, 24, 16).validate().unwrap();
        }
        assert_eq!(fixture().keys.rows(), 2048);
    }
}
