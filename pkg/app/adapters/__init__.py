# Adapter package.
