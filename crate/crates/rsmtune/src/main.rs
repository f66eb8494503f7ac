use rsmtune::cli;

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let outcome = cli::dispatch(&argv);
    if !outcome.output.is_empty() {
        let text = if outcome.output.ends_with('\n') {
            outcome.output
        } else {
            format!("{}\n", outcome.output)
        };
        if outcome.exit_code == 0 {
            print!("{text}");
        } else {
            eprint!("{text}");
        }
    }
    std::process::exit(outcome.exit_code);
}
