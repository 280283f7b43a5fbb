# Service package.
