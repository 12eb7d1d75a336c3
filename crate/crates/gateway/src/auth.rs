//! Static user store with salted SHA-256 password hashes, opaque bearer
//! tokens and a fixed-delay login throttle.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;
use std::time::Duration;

use edgepod_core::{Millis, SharedClock};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuthError {
    #[error("invalid credentials")]
    BadCredentials,
    #[error("user {0} is locked")]
    Locked(String),
    #[error("missing or invalid token")]
    InvalidToken,
    #[error("token expired")]
    Expired,
    #[error("invalid user file: {0}")]
    InvalidUsers(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub id: String,
    #[serde(default = "default_role")]
    pub role: Role,
    /// Hex-encoded salt.
    pub salt: String,
    /// Hex SHA-256 of `salt bytes || password`.
    pub password_hash: String,
    #[serde(default)]
    pub locked: bool,
}

fn default_role() -> Role {
    Role::User
}

impl UserRecord {
    /// Build a record with a fresh random salt.
    pub fn with_password(id: &str, role: Role, password: &str) -> Self {
        let mut salt = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut salt);
        Self {
            id: id.to_string(),
            role,
            salt: hex::encode(salt),
            password_hash: hash_password(&salt, password),
            locked: false,
        }
    }

    fn verify(&self, password: &str) -> bool {
        let Ok(salt) = hex::decode(&self.salt) else {
            return false;
        };
        let expected = hash_password(&salt, password);
        // compare in full to avoid an early-exit timing signal
        expected.len() == self.password_hash.len()
            && expected
                .bytes()
                .zip(self.password_hash.to_ascii_lowercase().bytes())
                .fold(0u8, |acc, (a, b)| acc | (a ^ b))
                == 0
    }
}

pub fn hash_password(salt: &[u8], password: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(password.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct UsersFile {
    #[serde(default)]
    pub users: Vec<UserRecord>,
}

impl UsersFile {
    pub fn from_toml_str(doc: &str) -> Result<Self, AuthError> {
        let file: UsersFile = toml::from_str(doc).map_err(|e| AuthError::InvalidUsers(e.to_string()))?;
        let mut seen = std::collections::BTreeSet::new();
        for u in &file.users {
            if !seen.insert(u.id.as_str()) {
                return Err(AuthError::InvalidUsers(format!("duplicate user {}", u.id)));
            }
            if hex::decode(&u.salt).is_err() {
                return Err(AuthError::InvalidUsers(format!("salt of {} is not hex", u.id)));
            }
        }
        Ok(file)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiToken {
    pub token: String,
    pub user_id: String,
    pub role: Role,
    pub expires_at: Millis,
}

impl ApiToken {
    pub fn is_admin(&self) -> bool {
        self.role == Role::Admin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuthPolicy {
    pub token_ttl: Duration,
    /// Delay applied to every attempt that follows a failed one for the same user.
    pub throttle: Duration,
}

impl Default for AuthPolicy {
    fn default() -> Self {
        Self {
            token_ttl: Duration::from_secs(8 * 3600),
            throttle: Duration::from_secs(1),
        }
    }
}

pub struct Authenticator {
    users: BTreeMap<String, UserRecord>,
    policy: AuthPolicy,
    clock: SharedClock,
    tokens: Mutex<HashMap<String, ApiToken>>,
    failures: Mutex<HashMap<String, u32>>,
}

impl std::fmt::Debug for Authenticator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Authenticator")
            .field("users", &self.users.len())
            .field("policy", &self.policy)
            .finish()
    }
}

impl Authenticator {
    pub fn new(users: Vec<UserRecord>, policy: AuthPolicy, clock: SharedClock) -> Self {
        Self {
            users: users.into_iter().map(|u| (u.id.clone(), u)).collect(),
            policy,
            clock,
            tokens: Mutex::new(HashMap::new()),
            failures: Mutex::new(HashMap::new()),
        }
    }

    /// Check credentials and issue a token. Blocks for the throttle delay when
    /// the previous attempt for `user_id` failed.
    pub fn authenticate(&self, user_id: &str, password: &str) -> Result<ApiToken, AuthError> {
        let prior_failures = self
            .failures
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(user_id)
            .copied()
            .unwrap_or(0);
        if prior_failures > 0 {
            self.clock.sleep(self.policy.throttle);
        }
        let outcome = match self.users.get(user_id) {
            Some(u) if u.verify(password) => {
                if u.locked {
                    Err(AuthError::Locked(u.id.clone()))
                } else {
                    Ok(u)
                }
            }
            _ => Err(AuthError::BadCredentials),
        };
        let mut failures = self.failures.lock().unwrap_or_else(|e| e.into_inner());
        let user = match outcome {
            Ok(u) => {
                failures.remove(user_id);
                u
            }
            Err(e) => {
                if e == AuthError::BadCredentials {
                    *failures.entry(user_id.to_string()).or_insert(0) += 1;
                }
                return Err(e);
            }
        };
        drop(failures);

        let mut raw = [0u8; 24];
        rand::thread_rng().fill_bytes(&mut raw);
        let token = ApiToken {
            token: hex::encode(raw),
            user_id: user.id.clone(),
            role: user.role,
            expires_at: self.clock.now_ms() + self.policy.token_ttl.as_millis() as Millis,
        };
        self.tokens
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(token.token.clone(), token.clone());
        Ok(token)
    }

    pub fn validate(&self, token: &str) -> Result<ApiToken, AuthError> {
        let mut tokens = self.tokens.lock().unwrap_or_else(|e| e.into_inner());
        let found = tokens.get(token).cloned().ok_or(AuthError::InvalidToken)?;
        if self.clock.now_ms() >= found.expires_at {
            tokens.remove(token);
            return Err(AuthError::Expired);
        }
        Ok(found)
    }

    pub fn revoke(&self, token: &str) -> bool {
        self.tokens
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .remove(token)
            .is_some()
    }

    pub fn consecutive_failures(&self, user_id: &str) -> u32 {
        self.failures
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(user_id)
            .copied()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use edgepod_core::{Clock, SimClock};
    use std::sync::Arc;

    fn setup() -> (SimClock, Authenticator) {
        let clock = SimClock::new(1_000_000);
        let mut locked = UserRecord::with_password("mallory", Role::User, "pw");
        locked.locked = true;
        let auth = Authenticator::new(
            vec![
                UserRecord::with_password("alice", Role::User, "wonderland"),
                UserRecord::with_password("root", Role::Admin, "toor"),
                locked,
            ],
            AuthPolicy::default(),
            Arc::new(clock.clone()),
        );
        (clock, auth)
    }

    #[test]
    fn token_accepted_until_ttl() {
        let (clock, auth) = setup();
        let t = auth.authenticate("alice", "wonderland").unwrap();
        assert_eq!(t.role, Role::User);
        assert_eq!(auth.validate(&t.token).unwrap().user_id, "alice");
        clock.advance(Duration::from_secs(8 * 3600 - 1));
        assert!(auth.validate(&t.token).is_ok());
        clock.advance(Duration::from_secs(1));
        assert_eq!(auth.validate(&t.token), Err(AuthError::Expired));
        assert_eq!(auth.validate(&t.token), Err(AuthError::InvalidToken));
    }

    #[test]
    fn errors_by_kind() {
        let (_, auth) = setup();
        assert_eq!(auth.authenticate("nobody", "x"), Err(AuthError::BadCredentials));
        assert_eq!(auth.authenticate("alice", "nope"), Err(AuthError::BadCredentials));
        assert_eq!(auth.authenticate("mallory", "pw"), Err(AuthError::Locked("mallory".into())));
        assert_eq!(auth.validate("deadbeef"), Err(AuthError::InvalidToken));
        assert!(auth.authenticate("root", "toor").unwrap().is_admin());
    }

    #[test]
    fn five_wrong_passwords_take_at_least_four_seconds() {
        let (clock, auth) = setup();
        let t0 = clock.now_ms();
        for _ in 0..5 {
            assert!(auth.authenticate("alice", "guess").is_err());
        }
        assert!(clock.now_ms() - t0 >= 4000);
        assert_eq!(auth.consecutive_failures("alice"), 5);
        // success resets the counter, after paying one more delay
        auth.authenticate("alice", "wonderland").unwrap();
        assert_eq!(auth.consecutive_failures("alice"), 0);
        let t1 = clock.now_ms();
        auth.authenticate("alice", "wonderland").unwrap();
        assert_eq!(clock.now_ms(), t1);
    }

    #[test]
    fn users_file_parsing() {
        let rec = UserRecord::with_password("bob", Role::Admin, "pw");
        let doc = format!(
            "[[users]]\nid = \"bob\"\nrole = \"admin\"\nsalt = \"{}\"\npassword_hash = \"{}\"\n",
            rec.salt, rec.password_hash
        );
        let f = UsersFile::from_toml_str(&doc).unwrap();
        assert_eq!(f.users, vec![rec]);
        let dup = format!("{doc}{doc}");
        assert!(matches!(UsersFile::from_toml_str(&dup), Err(AuthError::InvalidUsers(_))));
    }
}
