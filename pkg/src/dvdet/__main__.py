from dvdet.cli import main

raise SystemExit(main())
