//! Provisioning config and the on-disk layout of a provisioned system:
//! `rc.store`, `server.store`, and per user `user-<name>.store` plus
//! `card-<name>.card`.

use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::channel::{ProvisionSpec, System};
use crate::crypto::canonical_id;
use crate::proposed::store::{card_file_bytes, card_from_file, UserRecord};
use crate::proposed::{RcStore, ServerStore};

pub const RC_FILE: &str = "rc.store";
pub const SERVER_FILE: &str = "server.store";

pub fn user_file(name: &str) -> String {
    format!("user-{name}.store")
}

pub fn card_file(name: &str) -> String {
    format!("card-{name}.card")
}

/// Provisioning config: the server name and its users, in TOML.
///
/// ```toml
/// server = "server-1"
/// [[users]]
/// name = "alice"
/// password = "pw-1"
/// r_cont = "mailto:alice@recovery.example"
/// ```
pub fn parse_config(text: &str) -> Result<ProvisionSpec, HarnessError> {
    let spec: ProvisionSpec =
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    if spec.users.is_empty() {
        return Err(HarnessError::Config("config lists no users".into()));
    }
    for u in &spec.users {
        if u.name.is_empty() || u.name.contains(['/', '\\']) || u.name.starts_with('.') {
            return Err(HarnessError::Config(format!(
                "unusable user name {:?}",
                u.name
            )));
        }
    }
    Ok(spec)
}

/// Writes every store of `sys` into `dir`; returns the paths written.
pub fn write_stores(sys: &System, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut files = vec![
        (dir.join(RC_FILE), sys.rc.store.to_bytes()),
        (dir.join(SERVER_FILE), sys.server.store.to_bytes()),
    ];
    for (id, rec) in &sys.records {
        let card = sys
            .users
            .get(id)
            .and_then(|u| u.card.as_ref())
            .ok_or_else(|| HarnessError::Config(format!("{} holds no card", rec.name)))?;
        files.push((dir.join(user_file(&rec.name)), rec.to_bytes()));
        files.push((dir.join(card_file(&rec.name)), card_file_bytes(card)));
    }
    let mut paths = Vec::new();
    for (path, bytes) in files {
        std::fs::write(&path, bytes).map_err(|e| HarnessError::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

fn read(path: &Path) -> Result<Vec<u8>, HarnessError> {
    std::fs::read(path).map_err(|e| HarnessError::io(path, e))
}

/// Loads a provisioned system with the named users.
pub fn load_stores(dir: &Path, users: &[&str], seed: u64) -> Result<System, HarnessError> {
    let rc = RcStore::from_bytes(&read(&dir.join(RC_FILE))?)?;
    let server = ServerStore::from_bytes(&read(&dir.join(SERVER_FILE))?)?;
    let mut loaded = Vec::new();
    let mut server_name = None;
    for name in users {
        let rec = UserRecord::from_bytes(&read(&dir.join(user_file(name)))?)?;
        let card = card_from_file(&read(&dir.join(card_file(name)))?)?;
        if canonical_id(&rec.server).ok() == Some(server.sid) {
            server_name.get_or_insert_with(|| rec.server.clone());
        }
        loaded.push((rec, card));
    }
    let server_name = server_name
        .ok_or_else(|| HarnessError::Config("no user belongs to the stored server".into()))?;
    Ok(System::from_stores(rc, server, &server_name, loaded, seed)?)
}
