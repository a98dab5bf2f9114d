"""metalforge: diskless bare-metal provisioning from copy-on-write block images.

Nodes network-boot from images exported by a block gateway instead of
installing to local disks, so provisioning, snapshotting, cloning and
failure recovery are metadata operations rather than bulk copies.
"""

__version__ = "0.1.0"
