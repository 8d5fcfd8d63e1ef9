from mpattack.cli import main

raise SystemExit(main())
