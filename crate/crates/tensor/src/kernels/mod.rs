pub mod attention;
pub mod conv;
