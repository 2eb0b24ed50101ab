use std::process::ExitCode;

use clap::Parser;
use qkdn_cli::{execute, resolve_scenario, serve, Cli, Command};
use qkdn_core::harness::Network;
use qkdn_core::time::SimTime;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve {
            scenario,
            addr,
            warmup,
        } => serve_blocking(&scenario, addr, warmup).map(|_| 0),
        cmd => execute(cmd, &mut std::io::stdout().lock()),
    };
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        // downstream closed the pipe (e.g. `| head`)
        Err(e)
            if e.downcast_ref::<std::io::Error>()
                .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn serve_blocking(scenario: &str, addr: std::net::SocketAddr, warmup: f64) -> anyhow::Result<()> {
    let cfg = resolve_scenario(scenario)?;
    let mut net = Network::new(&cfg)?;
    net.run_until(SimTime::from_secs_f64(warmup));
    tokio::runtime::Runtime::new()?.block_on(serve::serve(net, addr))
}
