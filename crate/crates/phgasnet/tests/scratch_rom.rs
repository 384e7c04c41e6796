use nalgebra::DMatrix;
use phgasnet::io::preset;
use phgasnet::mor::{self};
use phgasnet::solver::{simulate, SolverConfig};

fn unfiltered_rom<'a>(
    sys: &'a phgasnet::network::NetworkSystem,
    snaps: &DMatrix<f64>,
    r: usize,
) -> Result<mor::ReducedModel<'a>, phgasnet::Error> {
    let lay = &sys.layout;
    let all: Vec<usize> = (0..sys.n_pipes()).collect();
    let ops = mor::space_ops(sys, &all);
    let n1 = lay.n_rho;
    let n2 = ops.j.ncols();
    let s_rho = snaps.rows(0, n1).into_owned();
    let s_m = snaps.rows(n1, n2).into_owned();
    let s_e = snaps.rows(n1 + n2, n2).into_owned();
    let scale_img = |s: &DMatrix<f64>| {
        let mut img = &ops.j * s;
        for i in 0..n1 {
            let sc = 1.0 / ops.m_rho_diag[i];
            for c in 0..img.ncols() { img[(i, c)] *= sc; }
        }
        img
    };
    let mut aug = DMatrix::<f64>::zeros(n1, s_rho.ncols() * 3);
    aug.columns_mut(0, s_rho.ncols()).copy_from(&s_rho);
    aug.columns_mut(s_rho.ncols(), s_m.ncols()).copy_from(&scale_img(&s_m));
    aug.columns_mut(2 * s_rho.ncols(), s_e.ncols()).copy_from(&scale_img(&s_e));
    let m_rho = DMatrix::from_diagonal(&ops.m_rho_diag);
    let (v_rho, _) = mor::pod(&aug, &m_rho, r)?;
    let v_m = mor::compatible_basis(&v_rho, &ops)?;
    let basis = mor::ReductionBasis {
        v_rho, v_e: v_m.clone(), v_m,
        mode: mor::ReductionMode::Network, singular_values: vec![],
    };
    mor::ReducedModel::new(sys, basis)
}

#[test]
#[ignore]
fn probe_parity_density() {
    for n in [100usize, 99] {
        let mut scn = preset("single-pipe-density").unwrap();
        scn.pipes[0].n_elements = n;
        let (sys, y0) = scn.build().unwrap();
        let config = SolverConfig { t_f: 30.0, ..SolverConfig::default() };
        let snaps = simulate(&sys, &y0, &config).unwrap();
        println!("--- n={n}");
        for r in 10..=17usize {
            match unfiltered_rom(&sys, &snaps.states, r) {
                Ok(rom) => {
                    let y0_r = rom.project_state(&y0);
                    match simulate(&rom, &y0_r, &config) {
                        Ok(red) => {
                            let lifted = rom.lift_snapshots(&red);
                            let err = phgasnet::diagnostics::trajectory_error(&sys, &snaps, &lifted).unwrap();
                            println!("n={n} r={r:2}  E_t {:.3e}", err.max);
                        }
                        Err(_) => println!("n={n} r={r:2}  E_t inf (diverged)"),
                    }
                }
                Err(e) => println!("n={n} r={r:2}  basis: {e}"),
            }
        }
    }
}

#[test]
#[ignore]
fn probe_diamond_ae() {
    let (sys, y0) = preset("diamond").unwrap().build().unwrap();
    let config = SolverConfig { t_f: 30.0, ..SolverConfig::default() };
    let snaps = simulate(&sys, &y0, &config).unwrap();
    for r in [26usize, 28, 29, 30, 32] {
        match unfiltered_rom(&sys, &snaps.states, r) {
            Ok(rom) => {
                let y0_r = rom.project_state(&y0);
                match simulate(&rom, &y0_r, &config) {
                    Ok(red) => {
                        let lifted = rom.lift_snapshots(&red);
                        let err = phgasnet::diagnostics::trajectory_error(&sys, &snaps, &lifted).unwrap();
                        println!("r={r:2}  E_t {:.3e}", err.max);
                    }
                    Err(_) => println!("r={r:2}  E_t inf (diverged)"),
                }
            }
            Err(e) => println!("r={r:2}  basis: {e}"),
        }
    }
}
