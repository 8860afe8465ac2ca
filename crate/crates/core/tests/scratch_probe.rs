use gamma_unmix::builtin;
use gamma_unmix::optimize::{bcd_fit, FitProblem};
use gamma_unmix::signature::ChannelGrid;
use gamma_unmix::simulate::{generate_spectrum, Scenario, ScenarioConfig};
use gamma_unmix::variability::SignatureSource;

#[test]
fn probe_outer_improvements() {
    let grid = ChannelGrid::default();
    let man = builtin::deformed_manifold(grid, builtin::DEFAULT_MANIFOLD_KNOTS).unwrap();
    let source = SignatureSource::Manifold(man);
    let cfg = ScenarioConfig::new(Scenario::Deformed, 40, 6);
    let n = source.n_signatures();
    let all: Vec<usize> = (0..n).collect();
    let mut nonconv = 0;
    for i in 0..12 {
        let spec = generate_spectrum(&cfg, &source, i).unwrap();
        let yf: Vec<f64> = spec.y.iter().map(|&c| c as f64).collect();
        let problem = FitProblem::new(&yf, &source, all.clone()).unwrap();
        let fit = bcd_fit(&problem).unwrap();
        let t = &fit.outer_nll_trace;
        let d: Vec<f64> = t.windows(2).map(|w| w[0] - w[1]).collect();
        let head: Vec<String> = d.iter().take(4).map(|x| format!("{x:.3e}")).collect();
        let tail: Vec<String> = d.iter().rev().take(4).rev().map(|x| format!("{x:.3e}")).collect();
        println!(
            "spec {i}: outers={} conv={} nll={:.6} param={:.6} d_head={head:?} d_tail={tail:?}",
            fit.outer_iterations, fit.converged, fit.nll, fit.param_hat.unwrap()
        );
        if !fit.converged {
            nonconv += 1;
        }
    }
    println!("nonconverged: {nonconv}/12");
}
