use knolling::checks;

const TOL: f64 = 1e-4;

fn assert_passes(r: knolling::nn::gradcheck::GradcheckReport) {
    for p in &r.params {
        assert!(p.max_rel_error < TOL, "{} {}: {:e}", r.label, p.name, p.max_rel_error);
    }
    assert!(r.passes(TOL));
    assert!(!r.params.is_empty());
}

#[test]
fn bilstm_gradients_match() {
    assert_passes(checks::bilstm(11));
}

#[test]
fn linear_softmax_ce_gradients_match() {
    assert_passes(checks::linear_softmax_ce(12));
}

#[test]
fn attention_gradients_match() {
    assert_passes(checks::attention(13));
}

#[test]
fn gmm_nll_gradients_match() {
    assert_passes(checks::gmm_nll(14));
}
