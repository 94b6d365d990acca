use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use cemsplit::complement::ConstantsReport;
use cemsplit::config::{ConfigBuilder, ExperimentConfig};
use cemsplit::experiments::{
    build_spaces_from_config, constants_report, contrast_sweep, elliptic_projection_study,
    kappa_field, run_example,
};
use cemsplit::fine::FineSystem;
use cemsplit::mesh::FineMesh;
use cemsplit::plot::{read_csv_table, render_svg, series_from_table};
use cemsplit::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cemsplit",
    version,
    about = "Multiscale splitting solvers for high-contrast diffusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set tau=5e-5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble the fine operators and print sanity checks.
    AssembleCheck(ConfigArgs),
    /// Build the coarse and complementary spaces and report their constants.
    BuildSpaces {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also write text dumps of every basis.
        #[arg(long)]
        dump: bool,
    },
    /// Compare the coarse time steppers against the fine reference.
    Run(ConfigArgs),
    /// Space constants across the configured contrasts.
    Sweep(ConfigArgs),
    /// Elliptic projection errors and the coarse-size sweep.
    Elliptic(ConfigArgs),
    /// Plot columns of a CSV file as an SVG chart with a log y axis.
    Plot {
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "time")]
        x: String,
        /// Plot columns whose names start with this prefix.
        #[arg(long, default_value = "err_")]
        prefix: String,
        #[arg(long, default_value = "")]
        title: String,
    },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut b = ConfigBuilder::new();
    if let Some(path) = &args.config {
        b.load(path)?;
    }
    for pair in &args.overrides {
        b.set_pair(pair)?;
    }
    b.build()
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn assemble_check(cfg: &ExperimentConfig) -> Result<()> {
    let mesh = FineMesh::new(cfg.n)?;
    let kappa = kappa_field(cfg, &mesh)?;
    let sys = FineSystem::new(mesh, kappa)?;
    let ones = cemsplit::nalgebra::DVector::from_element(sys.node_count(), 1.0);
    println!("nodes            {}", sys.node_count());
    println!("interior nodes   {}", sys.interior().len());
    println!("contrast         {:e}", sys.kappa.contrast());
    println!("stiffness asym   {:.3e}", sys.stiffness.symmetry_error());
    println!("mass asym        {:.3e}", sys.mass.symmetry_error());
    println!(
        "|A 1| / |A|_F    {:.3e}",
        sys.stiffness.matvec(&ones).amax() / sys.stiffness.frobenius_norm()
    );
    println!("1^T M 1          {:.15}", sys.mass.quad_form(&ones));
    Ok(())
}

fn print_report(r: &ConstantsReport) {
    println!("contrast {:e}", r.contrast);
    println!("  supG V1               {:.4e}", r.sup_g_v1);
    for (name, c) in [("first", &r.first), ("second", &r.second)] {
        println!("  {name} complement");
        println!("    supG                {:.4e}", c.sup_g);
        println!("    max color supG      {:.4e}", c.max_color_sup_g());
        println!("    gamma               {:.6}", c.gamma.value);
        println!("    beta                {:.6}", c.beta);
        if let Some(t) = c.max_tail {
            println!("    max eigenvalue tail {t:.4e}");
        }
        if c.dropped > 0 {
            println!("    dependent, dropped  {}", c.dropped);
        }
        if c.shortfall > 0 {
            println!("    missing modes       {}", c.shortfall);
        }
        println!("    tau (whole space)   {:.4e}", c.tau_whole);
        println!("    tau (per color)     {:.4e}", c.tau_colored);
    }
}

fn build_spaces_cmd(cfg: &ExperimentConfig, dump: bool) -> Result<()> {
    let t = Instant::now();
    let spaces = build_spaces_from_config(cfg)?;
    eprintln!("spaces built in {:.1}s", t.elapsed().as_secs_f64());
    println!(
        "dims: V1 {}, first complement {} (+{} dropped), second complement {} (+{} dropped)",
        spaces.v1.len(),
        spaces.first.basis.len(),
        spaces.first.dropped.len(),
        spaces.second.basis.len(),
        spaces.second.dropped.len()
    );
    let report = constants_report(&spaces, spaces.system.kappa.contrast(), cfg.omega)?;
    print_report(&report);
    let path = write(
        &cfg.output,
        "constants.csv",
        &ConstantsReport::to_csv(&[report]),
    )?;
    println!("wrote {}", path.display());
    if dump {
        for basis in [&spaces.v1, &spaces.first.basis, &spaces.second.basis] {
            fs::create_dir_all(&cfg.output)?;
            let path = cfg.output.join(format!("basis_{}.txt", basis.tag.as_str()));
            basis.write_dump(std::io::BufWriter::new(fs::File::create(&path)?))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn run_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let t = Instant::now();
    let spaces = build_spaces_from_config(cfg)?;
    eprintln!("spaces built in {:.1}s", t.elapsed().as_secs_f64());
    let outcome = run_example(cfg, &spaces)?;
    eprintln!("runs finished in {:.1}s", t.elapsed().as_secs_f64());
    for s in &outcome.series {
        let name = format!("errors_{}", s.choice.label());
        let csv = s.to_csv();
        write(&cfg.output, &format!("{name}.csv"), &csv)?;
        if let Some((h, rows)) = read_csv_table(&csv) {
            let svg = render_svg(
                &format!("relative energy error ({} complement)", s.choice.label()),
                "time",
                &series_from_table(&h, &rows, "time", "err_en"),
            );
            write(&cfg.output, &format!("{name}.svg"), &svg)?;
        }
        if let Some(last) = s.last() {
            println!("{} complement, t = {:.4}", s.choice.label(), last.time);
            println!("  method               L2 error      energy error");
            println!(
                "  CEM only             {:.4e}    {:.4e}",
                last.cem.0, last.cem.1
            );
            println!(
                "  implicit, enriched   {:.4e}    {:.4e}",
                last.implicit_extra.0, last.implicit_extra.1
            );
            println!(
                "  partially explicit   {:.4e}    {:.4e}",
                last.partial.0, last.partial.1
            );
        }
        if let Some(step) = s.partial_blowup {
            println!("  partially explicit run diverged at step {step}");
        }
    }
    write(&cfg.output, "reference.csv", &outcome.reference.to_csv())?;
    println!("wrote results to {}", cfg.output.display());
    Ok(())
}

fn sweep_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let t = Instant::now();
    let rows = contrast_sweep(cfg)?;
    eprintln!("sweep finished in {:.1}s", t.elapsed().as_secs_f64());
    for r in &rows {
        print_report(r);
    }
    let path = write(
        &cfg.output,
        "constants.csv",
        &ConstantsReport::to_csv(&rows),
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

fn elliptic_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let report = elliptic_projection_study(cfg)?;
    print!("{}", report.to_csv());
    let path = write(&cfg.output, "elliptic.csv", &report.to_csv())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn plot_cmd(csv: &Path, out: Option<PathBuf>, x: &str, prefix: &str, title: &str) -> Result<()> {
    let text = fs::read_to_string(csv).map_err(|e| Error::Load {
        path: csv.display().to_string(),
        reason: e.to_string(),
    })?;
    let (header, rows) = read_csv_table(&text).ok_or_else(|| Error::Load {
        path: csv.display().to_string(),
        reason: "not a rectangular CSV table".into(),
    })?;
    let series = series_from_table(&header, &rows, x, prefix);
    if series.is_empty() || rows.is_empty() {
        return Err(Error::Config(format!(
            "no `{prefix}*` columns against `{x}` in {}",
            csv.display()
        )));
    }
    let out = out.unwrap_or_else(|| csv.with_extension("svg"));
    fs::write(&out, render_svg(title, x, &series))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::AssembleCheck(a) => load_config(&a).and_then(|c| assemble_check(&c)),
        Command::BuildSpaces { cfg, dump } => {
            load_config(&cfg).and_then(|c| build_spaces_cmd(&c, dump))
        }
        Command::Run(a) => load_config(&a).and_then(|c| run_cmd(&c)),
        Command::Sweep(a) => load_config(&a).and_then(|c| sweep_cmd(&c)),
        Command::Elliptic(a) => load_config(&a).and_then(|c| elliptic_cmd(&c)),
        Command::Plot {
            csv,
            out,
            x,
            prefix,
            title,
        } => plot_cmd(&csv, out, &x, &prefix, &title),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
