pub mod experiment;
pub mod fit;
pub mod metrics;
pub mod simulate;
pub mod variance_profile;

/// `rep_007`-style directory and file stem, zero-padded to fit `total`.
pub fn replicate_name(index: usize, total: usize) -> String {
    let width = total.saturating_sub(1).to_string().len().max(3);
    format!("rep_{index:0width$}")
}

#[cfg(test)]
mod tests {
    #[test]
    fn replicate_names() {
        assert_eq!(super::replicate_name(7, 100), "rep_007");
        assert_eq!(super::replicate_name(12, 5000), "rep_0012");
    }
}
