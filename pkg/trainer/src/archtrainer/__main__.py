import sys

from archtrainer.trainer import main

sys.exit(main())
