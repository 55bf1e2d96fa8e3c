use std::collections::BTreeMap;
use std::f64::consts::PI;

use cone_pencil::cli::problem_to_json;
use cone_pencil::pencil::{builtin_problem, polar_pencil_from_symbol};
use cone_pencil::report::full_circle;
use cone_pencil::C64;

fn main() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("examples");
    let params = |kv: &[(&str, f64)]| kv.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>();
    let write = |name: &str, v: serde_json::Value| {
        std::fs::write(dir.join(name), serde_json::to_string_pretty(&v).unwrap() + "\n").unwrap();
    };
    let ex21 = builtin_problem("ex21_sector", &params(&[("d", PI / 2.0), ("alpha1", 0.5), ("alpha2", 0.5)])).unwrap();
    write("ex21.json", problem_to_json(&ex21).unwrap());
    let per = builtin_problem("periodic_laplace", &params(&[])).unwrap();
    write("periodic.json", problem_to_json(&per).unwrap());
    let dir_p = builtin_problem("dirichlet_laplace", &params(&[("d", PI)])).unwrap();
    write("dirichlet.json", problem_to_json(&dir_p).unwrap());
    let op = polar_pencil_from_symbol(C64::new(-1.0, 0.0), C64::new(0.0, -0.6), C64::new(-1.0, 0.0)).unwrap();
    write("symbol.json", problem_to_json(&full_circle(op, (0.0, 2.0 * PI))).unwrap());
}
