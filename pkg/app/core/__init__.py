# Core utilities: logging, configuration, errors
