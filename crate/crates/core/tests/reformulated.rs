use fbsde::linalg::Matrix;
use fbsde::problem::{make_problem, FbsdeProblem, ProblemKind};
use fbsde::sde::{euler_rollout, BrownianBatch, TimeGrid, TrajectoryBatch};

fn rollout(kind: ProblemKind, rows: usize, y0: Option<f64>) -> TrajectoryBatch {
    let prob: FbsdeProblem = make_problem(kind, &kind.default_params()).unwrap();
    let grid = TimeGrid::new(10, prob.horizon()).unwrap();
    let noise = BrownianBatch::sample(&grid, prob.dims().m, 0..rows, 7, 1, false).unwrap();
    let d = prob.dims().d;
    let x0 = Matrix::from_vec(&[rows, d], prob.x0().iter().cycle().take(rows * d).copied().collect()).unwrap();
    let start = match y0 {
        Some(v) => Matrix::from_vec(&[rows, 1], vec![v; rows]).unwrap(),
        None => prob.fields(0.0, &x0).unwrap().0,
    };
    euler_rollout(&prob, &grid, &noise, start, |_, t, x| Ok(prob.fields(t, x)?.1)).unwrap()
}

#[test]
fn exact_fields_keep_y_away_from_the_singularity() {
    // Along the exact decoupling field y stays near 10 e^{-r(T-t)} sin(π/4),
    // so the ‖z‖²/(σ̄y) term is harmless and no path blows up.
    let traj = rollout(ProblemKind::Example1Reformulated, 20_000, None);
    assert_eq!(traj.diverged_count(), 0);
    let ymin = traj.y.iter().flat_map(|m| m.data().iter().copied()).fold(f64::INFINITY, f64::min);
    assert!(ymin > 3.0, "{ymin}");
}

#[test]
fn both_formulations_agree_on_exact_fields_up_to_the_scheme() {
    let a = rollout(ProblemKind::Example1, 2000, None);
    let b = rollout(ProblemKind::Example1Reformulated, 2000, None);
    let gap =
        a.y.last()
            .unwrap()
            .data()
            .iter()
            .zip(b.y.last().unwrap().data())
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
    assert!(gap < 0.05, "{gap}");
}

#[test]
fn y_near_zero_trips_the_divergence_flag() {
    let traj = rollout(ProblemKind::Example1Reformulated, 64, Some(1e-16));
    assert!(traj.diverged_count() > 0);
    let traj = rollout(ProblemKind::Example1, 64, Some(1e-16));
    assert_eq!(traj.diverged_count(), 0);
}
