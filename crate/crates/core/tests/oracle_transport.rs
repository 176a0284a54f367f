use flowguide::selfcheck::{run_all, transport_fd, Faults};

#[test]
fn euler_refinement_on_oracle_field() {
    for seed in 0..3 {
        let fine = transport_fd(&[2.0, -1.0], 0.5, 4000, 50, false, seed).unwrap();
        let coarse = transport_fd(&[2.0, -1.0], 0.5, 4000, 5, false, seed).unwrap();
        assert!(fine <= coarse, "seed {seed}: {fine} > {coarse}");
    }
}

#[test]
fn euler_maruyama_is_reproducible() {
    let a = transport_fd(&[1.0, 0.0, -1.0], 0.7, 500, 30, true, 9).unwrap();
    let b = transport_fd(&[1.0, 0.0, -1.0], 0.7, 500, 30, true, 9).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    let c = transport_fd(&[1.0, 0.0, -1.0], 0.7, 500, 30, true, 10).unwrap();
    assert_ne!(a.to_bits(), c.to_bits());
}

#[test]
fn self_check_suites_pass_and_catch_injected_fault() {
    let clean = run_all(Faults::default());
    assert!(clean.iter().all(|r| r.passed), "{clean:#?}");
    let faulty = run_all(Faults {
        flip_guidance_sign: true,
    });
    let failed: Vec<&str> = faulty.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    assert_eq!(failed, ["stop_gradient"]);
}
