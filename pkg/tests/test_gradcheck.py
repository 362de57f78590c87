from mobiletl.gradcheck import TOL, run_suite


def test_every_layer_family_passes_finite_differences():
    results = run_suite(seed=0, instances=5)
    names = {r.name for r in results}
    assert {"conv", "conv_depthwise", "bn_full", "bn_shift_only", "bn_frozen",
            "relu6", "hardswish", "hardsigmoid", "se", "linear", "gap",
            "softmax_ce"} <= names
    for r in results:
        assert r.passed, (r.name, r.max_rel_err)
        assert r.max_rel_err <= TOL


def test_suite_is_deterministic():
    a = run_suite(seed=3, instances=2)
    b = run_suite(seed=3, instances=2)
    assert [(r.name, r.max_rel_err) for r in a] == \
           [(r.name, r.max_rel_err) for r in b]
