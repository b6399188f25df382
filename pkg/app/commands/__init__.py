# Subcommands: each module exposes register(subparsers) and a run(args) handler
