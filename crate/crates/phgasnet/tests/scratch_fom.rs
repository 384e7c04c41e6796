use phgasnet::io::preset;
use phgasnet::solver::{simulate, SolverConfig};
use std::io::Write;

#[test]
#[ignore]
fn dump_steady() {
    let (sys, y0) = preset("single-pipe").unwrap().build().unwrap();
    let config = SolverConfig { t_f: 30.0, ..SolverConfig::default() };
    let snaps = simulate(&sys, &y0, &config).unwrap();
    let last = snaps.states.column(snaps.states.ncols() - 1);
    let n = 100usize;
    let mut f = std::fs::File::create("/tmp/steady.csv").unwrap();
    writeln!(f, "i,rho,m,e").unwrap();
    for i in 0..=n {
        let rho = if i < n { last[i] } else { f64::NAN };
        writeln!(f, "{},{},{},{}", i, rho, last[n + i], last[n + (n + 1) + i]).unwrap();
    }
}
