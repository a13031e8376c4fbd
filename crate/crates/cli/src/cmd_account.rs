//! `account` and `calibrate`: thin wrappers over the RDP accountant.

use std::path::Path;

use dp_diffusion::accountant::{
    calibrate_sigma, compose, conversion_table, default_orders, subsampled_curve, to_dp, DpBudget,
};
use dp_diffusion::error::Error;
use dp_diffusion::{fmt_f64, Result};

use crate::common::{resolve_mechanism, write_file};
use crate::MechanismArgs;

fn print_curve_and_write(
    sigma: f64,
    q: f64,
    steps: usize,
    delta: f64,
    conversion: dp_diffusion::accountant::Conversion,
    csv: Option<&Path>,
) -> Result<DpBudget> {
    let curve = compose(&subsampled_curve(q, sigma, &default_orders())?, steps);
    let (budget, best_alpha) = to_dp(&curve, delta, conversion)?;
    let table = conversion_table(&curve, delta, conversion);
    println!("alpha  rdp_epsilon      epsilon");
    for (alpha, rdp, eps) in &table {
        println!("{alpha:>5}  {rdp:<15.9}  {eps:.9}");
    }
    println!(
        "epsilon = {:.6} at alpha = {best_alpha} (sigma = {sigma}, q = {q}, steps = {steps}, delta = {delta})",
        budget.epsilon
    );
    if let Some(path) = csv {
        let mut out = String::from("alpha,rdp_epsilon,epsilon\n");
        for (alpha, rdp, eps) in &table {
            out.push_str(&format!(
                "{},{},{}\n",
                fmt_f64(*alpha),
                fmt_f64(*rdp),
                fmt_f64(*eps)
            ));
        }
        write_file(path, &out)?;
        println!("curve written to {}", path.display());
    }
    Ok(budget)
}

pub fn account(sigma: f64, mech: &MechanismArgs, csv: Option<&Path>) -> Result<()> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "--sigma must be > 0, got {sigma}"
        )));
    }
    let (q, steps) = resolve_mechanism(mech)?;
    if steps == 0 {
        println!("no composition steps: zero privacy cost");
    }
    print_curve_and_write(sigma, q, steps, mech.delta, mech.conversion.into(), csv)?;
    Ok(())
}

pub fn calibrate(
    target_eps: f64,
    mech: &MechanismArgs,
    tol: f64,
    csv: Option<&Path>,
) -> Result<()> {
    let (q, steps) = resolve_mechanism(mech)?;
    let target = DpBudget {
        epsilon: target_eps,
        delta: mech.delta,
    };
    let sigma = calibrate_sigma(&target, q, steps, tol, mech.conversion.into())?;
    println!("sigma_dp = {sigma:.6}");
    print_curve_and_write(sigma, q, steps, mech.delta, mech.conversion.into(), csv)?;
    Ok(())
}
