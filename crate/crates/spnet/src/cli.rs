//! CLI dispatch (placeholder until subcommands land).
pub fn cli_dispatch(_argv: Vec<String>) -> i32 {
    2
}
