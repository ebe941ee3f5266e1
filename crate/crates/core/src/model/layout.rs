use serde::{Deserialize, Serialize};

use crate::error::{IkodError, Result};

/// Role of a sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Image,
    /// Instruction / prompt text.
    Other,
    Generated,
}

/// Per-position roles: a leading image block, then prompt text, then a
/// generated suffix.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    roles: Vec<Role>,
}

impl SequenceLayout {
    pub fn new(l_image: usize, l_others: usize, l_gen: usize) -> Self {
        let mut roles = Vec::with_capacity(l_image + l_others + l_gen);
        roles.extend(std::iter::repeat_n(Role::Image, l_image));
        roles.extend(std::iter::repeat_n(Role::Other, l_others));
        roles.extend(std::iter::repeat_n(Role::Generated, l_gen));
        Self { roles }
    }

    pub fn from_roles(roles: Vec<Role>) -> Result<Self> {
        let mut layout = Self::default();
        for role in roles {
            layout.push(role)?;
        }
        Ok(layout)
    }

    /// Appends a position, rejecting pushes that break the block order.
    pub fn push(&mut self, role: Role) -> Result<()> {
        if let Some(&last) = self.roles.last() {
            let ok = match role {
                Role::Image => last == Role::Image,
                Role::Other => last != Role::Generated,
                Role::Generated => true,
            };
            if !ok {
                return Err(IkodError::Layout(format!(
                    "cannot place {role:?} after {last:?}"
                )));
            }
        }
        self.roles.push(role);
        Ok(())
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn role(&self, pos: usize) -> Option<Role> {
        self.roles.get(pos).copied()
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    pub fn l_image(&self) -> usize {
        self.count(Role::Image)
    }

    pub fn l_others(&self) -> usize {
        self.count(Role::Other)
    }

    pub fn l_gen(&self) -> usize {
        self.count(Role::Generated)
    }

    /// First text position (prompt or generated).
    pub fn text_start(&self) -> usize {
        self.l_image()
    }

    pub fn text_len(&self) -> usize {
        self.len() - self.l_image()
    }

    pub fn is_image(&self, pos: usize) -> bool {
        self.role(pos) == Some(Role::Image)
    }

    pub fn generated_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == Role::Generated)
            .map(|(i, _)| i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let layout = SequenceLayout::new(3, 2, 4);
        assert_eq!(
            (layout.l_image(), layout.l_others(), layout.l_gen()),
            (3, 2, 4)
        );
        assert_eq!(layout.len(), 9);
        assert_eq!(layout.text_start(), 3);
        assert_eq!(layout.text_len(), 6);
        assert_eq!(
            layout.generated_positions().collect::<Vec<_>>(),
            vec![5, 6, 7, 8]
        );
    }

    #[test]
    fn block_order_enforced() {
        assert!(SequenceLayout::from_roles(vec![Role::Other, Role::Image]).is_err());
        assert!(SequenceLayout::from_roles(vec![Role::Generated, Role::Other]).is_err());
        assert!(
            SequenceLayout::from_roles(vec![Role::Image, Role::Generated, Role::Generated]).is_ok()
        );
    }
}
