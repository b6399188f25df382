# Middleware components
