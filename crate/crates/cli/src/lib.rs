//! Library surface of the command-line tool: the file formats shared
//! by the binary and by external callers that generate or consume its
//! artifacts.

pub mod schema;
