use decodet::gradcheck::{registry, run, GradcheckOptions};

const TOL: f64 = 1e-5;

#[test]
fn every_registered_op_passes() {
    for seed in [0, 1, 2] {
        let report = run(
            "all",
            TOL,
            &GradcheckOptions {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        for op in &report.ops {
            println!(
                "seed {seed} {:<28} rel {:.3e} ({})",
                op.op, op.max_rel_error, op.worst
            );
        }
        assert!(
            report.pass,
            "seed {seed}: {:#?}",
            report.ops.iter().filter(|o| !o.pass).collect::<Vec<_>>()
        );
        assert_eq!(report.ops.len(), registry().len());
    }
}

#[test]
fn scaled_backward_is_caught() {
    let opts = GradcheckOptions {
        backward_scale: 1.001,
        ..Default::default()
    };
    let report = run("all", TOL, &opts).unwrap();
    for op in &report.ops {
        assert!(!op.pass, "{} did not notice a 0.1% gradient error", op.op);
    }
}

#[test]
fn unknown_op_rejected() {
    assert!(run("softmax", TOL, &GradcheckOptions::default()).is_err());
}
