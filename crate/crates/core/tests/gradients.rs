mod common;

use common::{check_case, check_model, primitive_cases, TOL};
use deepnorm_core::gains::ArchShape;
use deepnorm_core::model::{InitScheme, ModelConfig, NormKind};

#[test]
fn every_primitive_matches_finite_differences() {
    for case in primitive_cases() {
        let worst = check_case(&case).unwrap();
        assert!(worst < TOL, "{}: relative error {worst:e}", case.name);
    }
}

fn small(arch: ArchShape, norm: NormKind, affine: bool) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ffn: 12,
        vocab_size: 6,
        max_seq_len: 4,
        ln_affine: affine,
        ..ModelConfig::desk(arch, norm, InitScheme::XavierGain1, 21)
    }
}

#[test]
fn model_gradients_for_each_scheme_and_arch() {
    let archs = [ArchShape::encoder_only(2), ArchShape::decoder_only(2), ArchShape::encoder_decoder(1, 2)];
    for arch in archs {
        for norm in [NormKind::PostLn, NormKind::PreLn, NormKind::NoLn, NormKind::DeepNorm] {
            let c = check_model(&small(arch, norm, norm != NormKind::NoLn)).unwrap();
            assert!(c.worst < TOL, "{:?} {:?}: relative error {:e}", arch.kind, norm, c.worst);
            assert!(c.checked > c.total / 2);
        }
    }
}
